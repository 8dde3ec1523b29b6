//! Amortized inference network for the continuous latent trajectory.
//!
//! A bidirectional GRU encodes the whole observation sequence into per-step
//! features. A causal GRU then consumes the feature at `t` together with the
//! previously sampled latent, and two linear heads emit the mean and log
//! standard deviations of a diagonal Gaussian over `z_t`. Sampling is
//! reparameterized, so for fixed noise the trajectory is a deterministic,
//! differentiable function of the parameters.
//!
//! Noise is always supplied by the caller; the module draws nothing itself.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    gaussian_entropy, gaussian_log_prob, gru_step, linear_forward, Graph, GruParams,
    LinearParams, ParamStore, TensorId,
};

#[derive(Clone, Debug)]
pub struct InferenceConfig {
    pub obs_dim: usize,
    pub latent_dim: usize,
    /// GRU width of each encoder direction.
    pub encoder_units: usize,
    /// GRU width of the causal posterior cell.
    pub causal_units: usize,
    /// Hidden widths of the discrete-posterior head used by the relaxed
    /// baseline; unused by the marginalized model.
    pub state_head_hidden: Vec<usize>,
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim < 1 || self.latent_dim < 1 || self.encoder_units < 1 || self.causal_units < 1
        {
            return Err(Error::config("inference dimensions must be positive"));
        }
        Ok(())
    }
}

/// Parameters of the inference network.
#[derive(Clone, Debug)]
pub struct InferenceParams {
    pub config: InferenceConfig,
    pub fwd_cell: GruParams,
    pub bwd_cell: GruParams,
    pub causal_cell: GruParams,
    pub head_mean: LinearParams,
    pub head_log_scale: LinearParams,
}

impl InferenceParams {
    pub fn init(store: &mut ParamStore, config: InferenceConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.obs_dim, config.latent_dim);
        let e = config.encoder_units;
        let c = config.causal_units;
        Ok(InferenceParams {
            fwd_cell: GruParams::init(store, "inf.fwd", d, e, rng),
            bwd_cell: GruParams::init(store, "inf.bwd", d, e, rng),
            // The causal cell sees [h^x_t, z_{t-1}].
            causal_cell: GruParams::init(store, "inf.causal", 2 * e + h, c, rng),
            head_mean: LinearParams::init(store, "inf.head_mean", c, h, rng),
            head_log_scale: LinearParams::init(store, "inf.head_log_scale", c, h, rng),
            config,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> InferenceNodes {
        InferenceNodes {
            config: self.config.clone(),
            fwd_cell: self.fwd_cell.bind(g, store),
            bwd_cell: self.bwd_cell.bind(g, store),
            causal_cell: self.causal_cell.bind(g, store),
            head_mean: self.head_mean.bind(g, store),
            head_log_scale: self.head_log_scale.bind(g, store),
        }
    }
}

pub struct InferenceNodes {
    pub config: InferenceConfig,
    pub fwd_cell: crate::nn::GruNodes,
    pub bwd_cell: crate::nn::GruNodes,
    pub causal_cell: crate::nn::GruNodes,
    pub head_mean: crate::nn::LinearNodes,
    pub head_log_scale: crate::nn::LinearNodes,
}

/// Bidirectional encoding: `h^x_t` is the concatenation of the forward GRU
/// state after reading `x_{1..=t}` and the backward GRU state after reading
/// `x_{T..=t}`, so every step depends on the entire sequence.
pub fn encode(g: &mut Graph, inf: &InferenceNodes, x: &[TensorId]) -> Result<Vec<TensorId>> {
    let t_len = x.len();
    if t_len == 0 {
        return Err(Error::config("encode needs T >= 1"));
    }
    let mut fwd = Vec::with_capacity(t_len);
    let mut state = inf.fwd_cell.zero_state(g);
    for &x_t in x {
        state = gru_step(g, &inf.fwd_cell, state, x_t)?;
        fwd.push(state);
    }
    let mut bwd = vec![None; t_len];
    let mut state = inf.bwd_cell.zero_state(g);
    for t in (0..t_len).rev() {
        state = gru_step(g, &inf.bwd_cell, state, x[t])?;
        bwd[t] = Some(state);
    }
    Ok((0..t_len)
        .map(|t| g.concat(&[fwd[t], bwd[t].unwrap()]))
        .collect())
}

/// A sampled latent trajectory with its variational log-density and the
/// analytic entropy of the per-step Gaussians.
pub struct PosteriorSample {
    pub z: Vec<TensorId>,
    pub means: Vec<TensorId>,
    pub log_scales: Vec<TensorId>,
    /// `sum_t log q(z_t | h^z_t)` at the sampled trajectory.
    pub log_q: TensorId,
    /// `sum_t H(q(z_t | h^z_t))`.
    pub entropy: TensorId,
}

/// Sequentially sample `z_t = mean_t + sigma_t .* noise_t` where the causal
/// cell consumes `[h^x_t, z_{t-1}]` and the heads read its state. The first
/// step sees a zero latent placeholder.
pub fn sample_posterior(
    g: &mut Graph,
    inf: &InferenceNodes,
    h_x: &[TensorId],
    noise: &[Vec<f64>],
) -> Result<PosteriorSample> {
    let t_len = h_x.len();
    let h = inf.config.latent_dim;
    if noise.len() != t_len {
        return Err(Error::usage(format!(
            "noise length {} does not match sequence length {t_len}",
            noise.len()
        )));
    }
    for n in noise {
        if n.len() != h {
            return Err(Error::usage("noise rows must have the latent dimension"));
        }
        if n.iter().any(|v| !v.is_finite()) {
            return Err(Error::usage("non-finite noise"));
        }
    }

    let mut z = Vec::with_capacity(t_len);
    let mut means = Vec::with_capacity(t_len);
    let mut log_scales = Vec::with_capacity(t_len);
    let mut log_q_terms = Vec::with_capacity(t_len);
    let mut entropy_terms = Vec::with_capacity(t_len);

    let zeros_h = vec![0.0; h];
    let mut z_prev = g.row(&zeros_h);
    let mut state = inf.causal_cell.zero_state(g);
    for t in 0..t_len {
        let input = g.concat(&[h_x[t], z_prev]);
        state = gru_step(g, &inf.causal_cell, state, input)?;
        let mean = linear_forward(g, &inf.head_mean, state);
        let log_scale = linear_forward(g, &inf.head_log_scale, state);
        let eps = g.row(&noise[t]);
        let sigma = g.exp(log_scale);
        let jitter = g.mul(sigma, eps);
        let z_t = g.add(mean, jitter);

        log_q_terms.push(gaussian_log_prob(g, z_t, mean, log_scale)?);
        entropy_terms.push(gaussian_entropy(g, log_scale)?);
        z.push(z_t);
        means.push(mean);
        log_scales.push(log_scale);
        z_prev = z_t;
    }

    Ok(PosteriorSample {
        z,
        means,
        log_scales,
        log_q: g.add_n(&log_q_terms),
        entropy: g.add_n(&entropy_terms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LN_2PI;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, h: usize, units: usize, seed: u64) -> (ParamStore, InferenceParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let inf = InferenceParams::init(
            &mut store,
            InferenceConfig {
                obs_dim: d,
                latent_dim: h,
                encoder_units: units,
                causal_units: units,
                state_head_hidden: vec![],
            },
            &mut rng,
        )
        .unwrap();
        (store, inf)
    }

    #[test]
    fn single_frame_encodes() {
        let (store, inf) = setup(2, 2, 4, 1);
        let mut g = Graph::new();
        let nodes = inf.bind(&mut g, &store);
        let x = vec![g.row(&[0.5, -0.5])];
        let h = encode(&mut g, &nodes, &x).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(g.shape_of(h[0]).cols, 8);
        assert!(g.values(h[0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let (mut store, inf) = setup(2, 2, 4, 2);
        for id in store.ids().collect::<Vec<_>>() {
            store.values_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let nodes = inf.bind(&mut g, &store);
        let x: Vec<_> = (0..5).map(|t| g.row(&[t as f64, 1.0])).collect();
        let h = encode(&mut g, &nodes, &x).unwrap();
        for h_t in h {
            assert!(g.values(h_t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn last_frame_reaches_first_feature() {
        // Bidirectionality witness: perturbing x_T changes h^x_1.
        let (store, inf) = setup(1, 2, 4, 3);
        let t_len = 6;
        let base: Vec<Vec<f64>> = (0..t_len).map(|t| vec![(t as f64).sin()]).collect();

        let mut g = Graph::new();
        let nodes = inf.bind(&mut g, &store);
        let x: Vec<_> = base.iter().map(|v| g.row(v)).collect();
        let h = encode(&mut g, &nodes, &x).unwrap();
        let h0 = g.values(h[0]).to_vec();

        let mut g2 = Graph::new();
        let nodes2 = inf.bind(&mut g2, &store);
        let mut perturbed = base.clone();
        perturbed[t_len - 1][0] += 1.0;
        let x2: Vec<_> = perturbed.iter().map(|v| g2.row(v)).collect();
        let h2 = encode(&mut g2, &nodes2, &x2).unwrap();
        let h0b = g2.values(h2[0]).to_vec();

        let diff: f64 = h0.iter().zip(&h0b).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "h^x_1 ignored x_T (diff {diff})");
    }

    #[test]
    fn zero_noise_returns_the_mean_path() {
        let (store, inf) = setup(1, 3, 4, 4);
        let mut g = Graph::new();
        let nodes = inf.bind(&mut g, &store);
        let x: Vec<_> = (0..4).map(|t| g.row(&[t as f64 * 0.2])).collect();
        let h = encode(&mut g, &nodes, &x).unwrap();
        let noise = vec![vec![0.0; 3]; 4];
        let sample = sample_posterior(&mut g, &nodes, &h, &noise).unwrap();
        for t in 0..4 {
            assert_eq!(g.values(sample.z[t]), g.values(sample.means[t]));
        }
    }

    #[test]
    fn unit_scale_entropy_closed_form() {
        let (mut store, inf) = setup(1, 3, 4, 5);
        // Zero the log-scale head so every step has log sigma = 0.
        store.values_mut(inf.head_log_scale.weight).fill(0.0);
        store.values_mut(inf.head_log_scale.bias).fill(0.0);
        let mut g = Graph::new();
        let nodes = inf.bind(&mut g, &store);
        let t_len = 5;
        let x: Vec<_> = (0..t_len).map(|t| g.row(&[t as f64])).collect();
        let h = encode(&mut g, &nodes, &x).unwrap();
        let noise = vec![vec![0.3; 3]; t_len];
        let sample = sample_posterior(&mut g, &nodes, &h, &noise).unwrap();
        let expect = t_len as f64 * 3.0 / 2.0 * (1.0 + LN_2PI);
        assert!((g.value_scalar(sample.entropy) - expect).abs() < 1e-10);
    }

    #[test]
    fn non_finite_noise_rejected() {
        let (store, inf) = setup(1, 2, 3, 6);
        let mut g = Graph::new();
        let nodes = inf.bind(&mut g, &store);
        let x = vec![g.row(&[0.1])];
        let h = encode(&mut g, &nodes, &x).unwrap();
        let noise = vec![vec![f64::NAN, 0.0]];
        assert!(sample_posterior(&mut g, &nodes, &h, &noise).is_err());
    }

    #[test]
    fn log_q_gradient_matches_finite_differences() {
        let (mut store, inf) = setup(1, 2, 3, 7);
        let t_len = 3;
        let x_vals: Vec<Vec<f64>> = (0..t_len).map(|t| vec![0.4 * t as f64 - 0.3]).collect();
        let noise: Vec<Vec<f64>> = vec![vec![0.7, -0.2], vec![0.1, 0.5], vec![-0.9, 0.3]];

        let eval = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let nodes = inf.bind(&mut g, store);
            let x: Vec<_> = x_vals.iter().map(|v| g.row(v)).collect();
            let h = encode(&mut g, &nodes, &x).unwrap();
            let s = sample_posterior(&mut g, &nodes, &h, &noise).unwrap();
            g.value_scalar(s.log_q)
        };

        let mut g = Graph::new();
        let nodes = inf.bind(&mut g, &store);
        let x: Vec<_> = x_vals.iter().map(|v| g.row(v)).collect();
        let h = encode(&mut g, &nodes, &x).unwrap();
        let s = sample_posterior(&mut g, &nodes, &h, &noise).unwrap();
        g.backward(s.log_q).unwrap();
        let grads = g.param_gradients(&store);

        let step = 1e-5;
        for pid in store.ids().collect::<Vec<_>>() {
            let n = store.values(pid).len();
            for i in (0..n).step_by(3) {
                let orig = store.values(pid)[i];
                store.values_mut(pid)[i] = orig + step;
                let hi = eval(&store);
                store.values_mut(pid)[i] = orig - step;
                let lo = eval(&store);
                store.values_mut(pid)[i] = orig;
                let fd = (hi - lo) / (2.0 * step);
                let ad = grads.get(pid)[i];
                let denom = fd.abs().max(1e-6);
                assert!(
                    ((ad - fd) / denom).abs() < 1e-4,
                    "param {} [{i}]: ad={ad} fd={fd}",
                    store.entry(pid).name
                );
            }
        }
    }

    #[test]
    fn entropy_matches_monte_carlo_negative_log_q() {
        let (store, inf) = setup(1, 2, 3, 8);
        let t_len = 3;
        let x_vals: Vec<Vec<f64>> = (0..t_len).map(|t| vec![0.2 * t as f64]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);

        // The per-step entropies depend on the sampled prefix, so compare
        // the paired difference (-log q) - entropy, which has mean zero.
        let mut g = Graph::new();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let draws = 10_000;
        for _ in 0..draws {
            g.clear();
            let nodes = inf.bind(&mut g, &store);
            let x: Vec<_> = x_vals.iter().map(|v| g.row(v)).collect();
            let h = encode(&mut g, &nodes, &x).unwrap();
            let noise: Vec<Vec<f64>> = (0..t_len)
                .map(|_| {
                    (0..2)
                        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .collect()
                })
                .collect();
            let s = sample_posterior(&mut g, &nodes, &h, &noise).unwrap();
            let v = -g.value_scalar(s.log_q) - g.value_scalar(s.entropy);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = (sum_sq / draws as f64 - mean * mean).max(0.0);
        let se = (var / draws as f64).sqrt();
        assert!(
            mean.abs() < 3.0 * se,
            "MC (-log q - entropy) should average zero: {mean} (se {se})"
        );
    }
}
