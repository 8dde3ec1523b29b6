//! Shared fixtures and independent oracles for the integration suites.
//!
//! Oracles here are deliberately written against the math, not the library
//! internals: path enumeration sums over every discrete assignment, and
//! finite differences probe gradients through full re-evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use snlds_core::data::Trajectory;
use snlds_core::hmm::{DiscretePosterior, LogPotentials};
use snlds_core::inference::{InferenceConfig, InferenceParams};
use snlds_core::model::{DiscreteInput, GenerativeParams, ModelConfig, TransitionFamily};
use snlds_core::nn::{lse_slice, Activation, ParamStore};

/// Random normalized potentials for a `(T, K)` instance.
pub fn random_potentials(t_len: usize, k: usize, rng: &mut impl Rng) -> LogPotentials {
    let mut log_init = vec![0.0; k];
    for v in log_init.iter_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    let z = lse_slice(&log_init);
    for v in log_init.iter_mut() {
        *v -= z;
    }
    let mut log_trans = vec![0.0; t_len.saturating_sub(1) * k * k];
    for t in 0..t_len.saturating_sub(1) {
        for j in 0..k {
            let base = (t * k + j) * k;
            for s in 0..k {
                log_trans[base + s] = rng.random_range(-2.0..2.0);
            }
            let z = lse_slice(&log_trans[base..base + k]);
            for s in 0..k {
                log_trans[base + s] -= z;
            }
        }
    }
    let mut log_obs = vec![0.0; t_len * k];
    for v in log_obs.iter_mut() {
        *v = rng.random_range(-3.0..1.0);
    }
    LogPotentials::new(t_len, k, log_init, log_trans, log_obs).unwrap()
}

/// Brute-force posterior over all `K^T` discrete paths.
pub fn enumerate_posterior(pot: &LogPotentials) -> DiscretePosterior {
    let (t_len, k) = (pot.num_steps, pot.num_states);
    let n_paths = k.pow(t_len as u32);
    let mut path = vec![0usize; t_len];
    let mut log_probs = Vec::with_capacity(n_paths);
    for idx in 0..n_paths {
        let mut rem = idx;
        for s in path.iter_mut() {
            *s = rem % k;
            rem /= k;
        }
        let mut lp = pot.log_init[path[0]] + pot.obs(0, path[0]);
        for t in 1..t_len {
            lp += pot.trans(t - 1, path[t - 1], path[t]) + pot.obs(t, path[t]);
        }
        log_probs.push(lp);
    }
    let log_z = lse_slice(&log_probs);
    let mut gamma1 = vec![0.0; t_len * k];
    let mut gamma2 = vec![0.0; t_len.saturating_sub(1) * k * k];
    for (idx, lp) in log_probs.iter().enumerate() {
        let w = (lp - log_z).exp();
        let mut rem = idx;
        for s in path.iter_mut() {
            *s = rem % k;
            rem /= k;
        }
        for t in 0..t_len {
            gamma1[t * k + path[t]] += w;
        }
        for t in 0..t_len - 1 {
            gamma2[(t * k + path[t]) * k + path[t + 1]] += w;
        }
    }
    DiscretePosterior {
        num_steps: t_len,
        num_states: k,
        gamma1,
        gamma2,
        log_z,
    }
}

/// A small random model/inference pair for gradient probes.
pub fn tiny_instance(
    k: usize,
    h: usize,
    d: usize,
    seed: u64,
) -> (ParamStore, GenerativeParams, InferenceParams) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gen = GenerativeParams::init(
        &mut store,
        ModelConfig {
            num_states: k,
            latent_dim: h,
            obs_dim: d,
            transition_family: TransitionFamily::Mlp,
            discrete_input: DiscreteInput::PrevObservation,
            emission_hidden: vec![3],
            transition_hidden: vec![3],
            transition_gru_units: 0,
            discrete_hidden: vec![],
            hidden_activation: Activation::Tanh,
            init_obs_log_scale: 0.0,
            init_trans_log_scale: 0.0,
        },
        &mut rng,
    )
    .unwrap();
    let inf = InferenceParams::init(
        &mut store,
        InferenceConfig {
            obs_dim: d,
            latent_dim: h,
            encoder_units: 3,
            causal_units: 3,
            state_head_hidden: vec![],
        },
        &mut rng,
    )
    .unwrap();
    // Break the all-zero defaults on scales and means so gradients are
    // informative.
    for pid in store.ids().collect::<Vec<_>>() {
        let name = store.entry(pid).name.clone();
        if name.contains("scale") || name.contains("init_mean") || name.contains("logits") {
            for v in store.values_mut(pid).iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    (store, gen, inf)
}

/// Random observed trajectory plus frozen reparameterization noise.
pub fn random_sequence(
    t_len: usize,
    d: usize,
    h: usize,
    rng: &mut impl Rng,
) -> (Trajectory, Vec<Vec<f64>>) {
    let x: Vec<f64> = (0..t_len * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let noise: Vec<Vec<f64>> = (0..t_len)
        .map(|_| {
            (0..h)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();
    (
        Trajectory {
            steps: t_len,
            obs_dim: d,
            x,
            labels: None,
        },
        noise,
    )
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
