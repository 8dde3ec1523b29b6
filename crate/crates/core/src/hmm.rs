//! Exact marginalization of the discrete switching states.
//!
//! Given per-timestep log potentials (initial distribution, transition
//! matrices, soft evidence), [`forward_backward`] computes the
//! log-normalizer and the smoothed unary/pairwise marginals in log space.
//! [`surrogate_loss`] then builds the collapsed gradient objective: a
//! weighted sum of the potentials with the marginals held constant, whose
//! gradient with respect to any upstream parameter equals the gradient of
//! the log-normalizer. [`ce_regularizer`] is the differentiable
//! uniform-vs-posterior KL penalty used to keep all states in play early in
//! training; unlike the surrogate it backpropagates through the message
//! recursions themselves.
//!
//! All message passing uses log-sum-exp; linear-space messages underflow on
//! hundred-step sequences.

use crate::error::{Error, Result};
use crate::nn::graph::{lse_slice, Graph, TensorId};

const ROW_SUM_TOL: f64 = 1e-10;

/// Per-timestep HMM quantities in log space for one sequence of length `T`
/// with `K` discrete states.
///
/// * `log_init[k]`: log of the initial state distribution.
/// * `log_trans[t][j][k]` for `t` in `0..T-1`: log probability of moving
///   from state `j` at step `t` to state `k` at step `t+1`. Rows (fixed `j`)
///   are normalized distributions.
/// * `log_obs[t][k]`: log soft evidence for state `k` at step `t`;
///   unnormalized over `k`.
#[derive(Clone, Debug)]
pub struct LogPotentials {
    pub num_steps: usize,
    pub num_states: usize,
    pub log_init: Vec<f64>,
    pub log_trans: Vec<f64>,
    pub log_obs: Vec<f64>,
}

impl LogPotentials {
    pub fn new(
        num_steps: usize,
        num_states: usize,
        log_init: Vec<f64>,
        log_trans: Vec<f64>,
        log_obs: Vec<f64>,
    ) -> Result<Self> {
        let (t, k) = (num_steps, num_states);
        if t < 1 || k < 1 {
            return Err(Error::config("potentials need T >= 1 and K >= 1"));
        }
        if log_init.len() != k || log_obs.len() != t * k || log_trans.len() != t.saturating_sub(1) * k * k
        {
            return Err(Error::config("potential array lengths do not match T, K"));
        }
        let pot = LogPotentials {
            num_steps,
            num_states,
            log_init,
            log_trans,
            log_obs,
        };
        pot.validate()?;
        Ok(pot)
    }

    fn validate(&self) -> Result<()> {
        if self.log_obs.iter().any(|v| !v.is_finite())
            || self.log_init.iter().any(|v| !v.is_finite())
            || self.log_trans.iter().any(|v| !v.is_finite())
        {
            return Err(Error::numeric("non-finite log potential"));
        }
        let k = self.num_states;
        let init_sum: f64 = self.log_init.iter().map(|v| v.exp()).sum();
        if (init_sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::config(format!(
                "initial distribution sums to {init_sum}, expected 1"
            )));
        }
        for t in 0..self.num_steps.saturating_sub(1) {
            for j in 0..k {
                let base = (t * k + j) * k;
                let row_sum: f64 = self.log_trans[base..base + k].iter().map(|v| v.exp()).sum();
                if (row_sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::config(format!(
                        "transition row ({t},{j}) sums to {row_sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn obs(&self, t: usize, k: usize) -> f64 {
        self.log_obs[t * self.num_states + k]
    }

    #[inline]
    pub fn trans(&self, t: usize, j: usize, k: usize) -> f64 {
        self.log_trans[(t * self.num_states + j) * self.num_states + k]
    }
}

/// Smoothed posterior over discrete states given all evidence.
///
/// `gamma1[t][k]` is the unary marginal; `gamma2[t][j][k]` for `t` in
/// `0..T-1` is the pairwise marginal of being in `j` at step `t` and `k` at
/// step `t+1`; `log_z` is the log of the summed evidence.
#[derive(Clone, Debug)]
pub struct DiscretePosterior {
    pub num_steps: usize,
    pub num_states: usize,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub log_z: f64,
}

impl DiscretePosterior {
    #[inline]
    pub fn unary(&self, t: usize, k: usize) -> f64 {
        self.gamma1[t * self.num_states + k]
    }

    #[inline]
    pub fn pairwise(&self, t: usize, j: usize, k: usize) -> f64 {
        self.gamma2[(t * self.num_states + j) * self.num_states + k]
    }

    /// Unary marginals of one step as a slice.
    pub fn unary_row(&self, t: usize) -> &[f64] {
        &self.gamma1[t * self.num_states..(t + 1) * self.num_states]
    }
}

/// Log-space forward-backward pass.
pub fn forward_backward(pot: &LogPotentials) -> Result<DiscretePosterior> {
    pot.validate()?;
    let (t_len, k) = (pot.num_steps, pot.num_states);

    // alpha[t][k] = log p(evidence[0..=t], s_t = k)
    let mut alpha = vec![0.0; t_len * k];
    for s in 0..k {
        alpha[s] = pot.log_init[s] + pot.obs(0, s);
    }
    let mut work = vec![0.0; k];
    for t in 1..t_len {
        for s in 0..k {
            for j in 0..k {
                work[j] = alpha[(t - 1) * k + j] + pot.trans(t - 1, j, s);
            }
            alpha[t * k + s] = pot.obs(t, s) + lse_slice(&work);
        }
    }
    let log_z = lse_slice(&alpha[(t_len - 1) * k..t_len * k]);
    if !log_z.is_finite() {
        return Err(Error::numeric("log normalizer is not finite"));
    }

    // beta[t][k] = log p(evidence[t+1..] | s_t = k)
    let mut beta = vec![0.0; t_len * k];
    for t in (0..t_len.saturating_sub(1)).rev() {
        for j in 0..k {
            for s in 0..k {
                work[s] = pot.trans(t, j, s) + pot.obs(t + 1, s) + beta[(t + 1) * k + s];
            }
            beta[t * k + j] = lse_slice(&work);
        }
    }

    let mut gamma1 = vec![0.0; t_len * k];
    for t in 0..t_len {
        for s in 0..k {
            gamma1[t * k + s] = (alpha[t * k + s] + beta[t * k + s] - log_z).exp();
        }
        // Renormalize away the last bits of rounding error.
        let row = &mut gamma1[t * k..(t + 1) * k];
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    let mut gamma2 = vec![0.0; t_len.saturating_sub(1) * k * k];
    for t in 0..t_len.saturating_sub(1) {
        let mut sum = 0.0;
        for j in 0..k {
            for s in 0..k {
                let v = (alpha[t * k + j]
                    + pot.trans(t, j, s)
                    + pot.obs(t + 1, s)
                    + beta[(t + 1) * k + s]
                    - log_z)
                    .exp();
                gamma2[(t * k + j) * k + s] = v;
                sum += v;
            }
        }
        let block = &mut gamma2[t * k * k..(t + 1) * k * k];
        for v in block.iter_mut() {
            *v /= sum;
        }
    }

    Ok(DiscretePosterior {
        num_steps: t_len,
        num_states: k,
        gamma1,
        gamma2,
        log_z,
    })
}

/// Graph-side mirror of [`LogPotentials`]: one `(K,K)` log-transition node
/// per step pair, one `(1,K)` log-evidence node per step, and the initial
/// log distribution.
pub struct PotentialNodes {
    pub num_states: usize,
    pub log_init: TensorId,
    pub log_trans: Vec<TensorId>,
    pub log_obs: Vec<TensorId>,
}

impl PotentialNodes {
    pub fn num_steps(&self) -> usize {
        self.log_obs.len()
    }

    /// Read the current node values out of the graph as plain potentials.
    pub fn detach(&self, g: &Graph) -> Result<LogPotentials> {
        let k = self.num_states;
        let t = self.num_steps();
        let mut log_trans = Vec::with_capacity(t.saturating_sub(1) * k * k);
        for &n in &self.log_trans {
            log_trans.extend_from_slice(g.values(n));
        }
        let mut log_obs = Vec::with_capacity(t * k);
        for &n in &self.log_obs {
            log_obs.extend_from_slice(g.values(n));
        }
        LogPotentials::new(t, k, g.values(self.log_init).to_vec(), log_trans, log_obs)
    }
}

/// Collapsed-gradient surrogate: the marginal-weighted sum of log potentials
/// with the posterior treated as constants,
///
/// ```text
/// sum_{t>=1} sum_{j,k} gamma2[t-1][j][k] (log_obs[t][k] + log_trans[t-1][j][k])
///   + sum_k gamma1[0][k] (log_obs[0][k] + log_init[k])
/// ```
///
/// Its gradient with respect to every parameter feeding the potentials
/// equals the gradient of the log-normalizer, so maximizing it maximizes
/// the collapsed likelihood. No gradient flows into the marginals.
pub fn surrogate_loss(
    g: &mut Graph,
    pot: &PotentialNodes,
    post: &DiscretePosterior,
) -> Result<TensorId> {
    let k = pot.num_states;
    let t_len = pot.num_steps();
    if post.num_states != k || post.num_steps != t_len {
        return Err(Error::usage(format!(
            "posterior shape ({}, {}) does not match potentials ({}, {})",
            post.num_steps, post.num_states, t_len, k
        )));
    }
    if pot.log_trans.len() != t_len.saturating_sub(1) {
        return Err(Error::usage("potential nodes have inconsistent lengths"));
    }

    let mut terms = Vec::with_capacity(2 * t_len);
    let first_obs = g.weighted_sum(pot.log_obs[0], post.unary_row(0));
    let first_init = g.weighted_sum(pot.log_init, post.unary_row(0));
    terms.push(first_obs);
    terms.push(first_init);

    let mut obs_weights = vec![0.0; k];
    for t in 0..t_len.saturating_sub(1) {
        let block = &post.gamma2[t * k * k..(t + 1) * k * k];
        terms.push(g.weighted_sum(pot.log_trans[t], block));
        // Marginalize the pairwise weights over the source state for the
        // evidence term at step t+1.
        for (s, w) in obs_weights.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..k {
                acc += block[j * k + s];
            }
            *w = acc;
        }
        terms.push(g.weighted_sum(pot.log_obs[t + 1], &obs_weights));
    }
    Ok(g.add_n(&terms))
}

/// Differentiable `sum_t KL(uniform || gamma1_t)` built by re-running the
/// message recursions with graph operations, so the penalty's gradient
/// reaches the parameters that shape the posterior.
pub fn ce_regularizer(g: &mut Graph, pot: &PotentialNodes) -> TensorId {
    let k = pot.num_states;
    let t_len = pot.num_steps();

    let mut alphas = Vec::with_capacity(t_len);
    let mut alpha = g.add(pot.log_init, pot.log_obs[0]);
    alphas.push(alpha);
    for t in 1..t_len {
        let msg = g.lse_matvec(pot.log_trans[t - 1], alpha);
        alpha = g.add(msg, pot.log_obs[t]);
        alphas.push(alpha);
    }
    let log_z = g.logsumexp(alphas[t_len - 1]);

    let mut betas = vec![None; t_len];
    let zeros = vec![0.0; k];
    betas[t_len - 1] = Some(g.row(&zeros));
    for t in (0..t_len.saturating_sub(1)).rev() {
        let with_obs = g.add(betas[t + 1].unwrap(), pot.log_obs[t + 1]);
        betas[t] = Some(g.lse_matvec_t(pot.log_trans[t], with_obs));
    }

    // KL(u || gamma_t) = -ln K - (1/K) sum_k log gamma_t(k)
    //                  = -ln K - (1/K) sum_k (alpha_t(k) + beta_t(k)) + log_z
    let mut sums = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let ab = g.add(alphas[t], betas[t].unwrap());
        sums.push(g.sum(ab));
    }
    let total = g.add_n(&sums);
    let scaled = g.scale(total, -1.0 / k as f64);
    let z_term = g.scale(log_z, t_len as f64);
    let combined = g.add(scaled, z_term);
    g.add_scalar(combined, -(t_len as f64) * (k as f64).ln())
}

/// Row-wise tempered softmax of a `K x K` logit matrix: each output row is
/// `softmax(row / tau)`.
pub fn apply_temperature(logits: &[f64], num_states: usize, tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::usage(format!("temperature must be positive, got {tau}")));
    }
    let k = num_states;
    if logits.len() != k * k {
        return Err(Error::usage("logit matrix must be K x K"));
    }
    let mut out = vec![0.0; k * k];
    let mut row = vec![0.0; k];
    for j in 0..k {
        for s in 0..k {
            row[s] = logits[j * k + s] / tau;
        }
        let z = lse_slice(&row);
        for s in 0..k {
            out[j * k + s] = (row[s] - z).exp();
        }
    }
    Ok(out)
}

/// `sum_t KL(uniform(K) || gamma1_t)` on plain marginals, with posterior
/// entries clamped below at `1e-12`. Always non-negative.
pub fn posterior_uniform_kl(gamma1: &[f64], num_states: usize) -> f64 {
    let k = num_states;
    debug_assert_eq!(gamma1.len() % k, 0);
    let t_len = gamma1.len() / k;
    let u = 1.0 / k as f64;
    let mut total = 0.0;
    for t in 0..t_len {
        for s in 0..k {
            let p = gamma1[t * k + s].max(1e-12);
            total += u * (u / p).ln();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random normalized potentials for a (T, K) instance.
    pub(crate) fn random_potentials(t_len: usize, k: usize, rng: &mut impl Rng) -> LogPotentials {
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

    /// Brute-force enumeration over all K^T state paths.
    pub(crate) fn enumerate_posterior(pot: &LogPotentials) -> DiscretePosterior {
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

    #[test]
    fn single_state_collapses_to_sum_of_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t_len = 7;
        let pot = random_potentials(t_len, 1, &mut rng);
        let post = forward_backward(&pot).unwrap();
        assert!(post.gamma1.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let expect: f64 = pot.log_init[0] + (0..t_len).map(|t| pot.obs(t, 0)).sum::<f64>();
        assert!((post.log_z - expect).abs() < 1e-12);
    }

    #[test]
    fn single_step_is_bayes_rule() {
        let pot = LogPotentials::new(
            1,
            3,
            vec![(0.5f64).ln(), (0.3f64).ln(), (0.2f64).ln()],
            vec![],
            vec![-1.0, 0.5, -0.2],
        )
        .unwrap();
        let post = forward_backward(&pot).unwrap();
        let mut joint = [0.0; 3];
        for s in 0..3 {
            joint[s] = pot.log_init[s] + pot.obs(0, s);
        }
        let z = lse_slice(&joint);
        for s in 0..3 {
            assert!((post.unary(0, s) - (joint[s] - z).exp()).abs() < 1e-12);
        }
        assert!((post.log_z - z).abs() < 1e-12);
        assert!(post.gamma2.is_empty());
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let t_len = 1 + (trial % 6);
            let k = 1 + (trial % 4);
            let pot = random_potentials(t_len, k, &mut rng);
            let fast = forward_backward(&pot).unwrap();
            let slow = enumerate_posterior(&pot);
            assert!(
                (fast.log_z - slow.log_z).abs() < 1e-8,
                "log_z mismatch at T={t_len} K={k}"
            );
            for (a, b) in fast.gamma1.iter().zip(&slow.gamma1) {
                assert!((a - b).abs() < 1e-8);
            }
            for (a, b) in fast.gamma2.iter().zip(&slow.gamma2) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn posterior_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..25 {
            let t_len = rng.random_range(2..=6);
            let k = rng.random_range(2..=4);
            let pot = random_potentials(t_len, k, &mut rng);
            let post = forward_backward(&pot).unwrap();
            for t in 0..t_len {
                let s: f64 = post.unary_row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-8);
            }
            for t in 0..t_len - 1 {
                let s: f64 = post.gamma2[t * k * k..(t + 1) * k * k].iter().sum();
                assert!((s - 1.0).abs() < 1e-8);
                for state in 0..k {
                    let marg: f64 = (0..k).map(|j| post.pairwise(t, j, state)).sum();
                    assert!((marg - post.unary(t + 1, state)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn nan_potentials_rejected() {
        let pot = LogPotentials {
            num_steps: 2,
            num_states: 2,
            log_init: vec![(0.5f64).ln(); 2],
            log_trans: vec![(0.5f64).ln(); 4],
            log_obs: vec![0.0, f64::NAN, 0.0, 0.0],
        };
        assert!(forward_backward(&pot).is_err());
    }

    fn potentials_into_graph(g: &mut Graph, pot: &LogPotentials) -> PotentialNodes {
        let k = pot.num_states;
        PotentialNodes {
            num_states: k,
            log_init: g.row(&pot.log_init),
            log_trans: (0..pot.num_steps - 1)
                .map(|t| {
                    g.constant(
                        crate::nn::Shape::matrix(k, k),
                        &pot.log_trans[t * k * k..(t + 1) * k * k],
                    )
                })
                .collect(),
            log_obs: (0..pot.num_steps)
                .map(|t| g.row(&pot.log_obs[t * k..(t + 1) * k]))
                .collect(),
        }
    }

    #[test]
    fn surrogate_gradient_wrt_evidence_is_the_unary_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pot = random_potentials(4, 3, &mut rng);
        let post = forward_backward(&pot).unwrap();
        let mut g = Graph::new();
        let nodes = potentials_into_graph(&mut g, &pot);
        let loss = surrogate_loss(&mut g, &nodes, &post).unwrap();
        g.backward(loss).unwrap();
        for t in 0..4 {
            let grad = g.grad_of(nodes.log_obs[t]);
            for s in 0..3 {
                assert!(
                    (grad[s] - post.unary(t, s)).abs() < 1e-10,
                    "d surrogate / d log_obs[{t}][{s}] should be gamma1"
                );
            }
        }
    }

    #[test]
    fn surrogate_gradient_matches_log_z_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..50 {
            let t_len = 2 + (trial % 4);
            let k = 2 + (trial % 2);
            let pot = random_potentials(t_len, k, &mut rng);
            let post = forward_backward(&pot).unwrap();
            let mut g = Graph::new();
            let nodes = potentials_into_graph(&mut g, &pot);
            let loss = surrogate_loss(&mut g, &nodes, &post).unwrap();
            g.backward(loss).unwrap();

            // Perturb a random evidence entry; evidence is unnormalized so a
            // raw finite difference of log_z is well-defined.
            let t = rng.random_range(0..t_len);
            let s = rng.random_range(0..k);
            let h = 1e-5;
            let mut hi = pot.clone();
            hi.log_obs[t * k + s] += h;
            let mut lo = pot.clone();
            lo.log_obs[t * k + s] -= h;
            let fd = (forward_backward(&hi).unwrap().log_z
                - forward_backward(&lo).unwrap().log_z)
                / (2.0 * h);
            let ad = g.grad_of(nodes.log_obs[t])[s];
            let denom = fd.abs().max(1e-8);
            assert!(
                ((ad - fd) / denom).abs() < 1e-4,
                "trial {trial}: ad={ad} fd={fd}"
            );
        }
    }

    #[test]
    fn ce_regularizer_matches_plain_kl_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let pot = random_potentials(5, 3, &mut rng);
        let post = forward_backward(&pot).unwrap();
        let expect = posterior_uniform_kl(&post.gamma1, 3);

        let mut g = Graph::new();
        let nodes = potentials_into_graph(&mut g, &pot);
        let ce = ce_regularizer(&mut g, &nodes);
        assert!((g.value_scalar(ce) - expect).abs() < 1e-9);

        // Finite-difference check through the recursion.
        g.backward(ce).unwrap();
        let h = 1e-5;
        for &(t, s) in &[(0usize, 1usize), (2, 0), (4, 2)] {
            let mut hi = pot.clone();
            hi.log_obs[t * 3 + s] += h;
            let mut lo = pot.clone();
            lo.log_obs[t * 3 + s] -= h;
            let f_hi = posterior_uniform_kl(&forward_backward(&hi).unwrap().gamma1, 3);
            let f_lo = posterior_uniform_kl(&forward_backward(&lo).unwrap().gamma1, 3);
            let fd = (f_hi - f_lo) / (2.0 * h);
            let ad = g.grad_of(nodes.log_obs[t])[s];
            assert!(
                (ad - fd).abs() < 1e-5 * fd.abs().max(1.0),
                "ce grad mismatch at ({t},{s}): ad={ad} fd={fd}"
            );
        }
    }

    #[test]
    fn temperature_one_is_plain_softmax() {
        let logits = [0.3, -1.0, 2.0, 0.0];
        let out = apply_temperature(&logits, 2, 1.0).unwrap();
        for j in 0..2 {
            let z = lse_slice(&logits[j * 2..(j + 1) * 2]);
            for s in 0..2 {
                assert!((out[j * 2 + s] - (logits[j * 2 + s] - z).exp()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn huge_temperature_flattens_rows() {
        let logits = [5.0, -3.0, 2.0, 0.5, -1.0, 4.0, 0.0, 0.0, 1.0];
        let out = apply_temperature(&logits, 3, 1e6).unwrap();
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn temperature_half_doubles_logits() {
        let out = apply_temperature(&[2.0, 0.0, 0.0, 2.0], 2, 0.5).unwrap();
        // softmax([4, 0]) to five decimals
        assert!((out[0] - 0.98201).abs() < 1e-5);
        assert!((out[1] - 0.01799).abs() < 1e-5);
    }

    #[test]
    fn temperature_rejects_non_positive() {
        assert!(apply_temperature(&[0.0; 4], 2, 0.0).is_err());
        assert!(apply_temperature(&[0.0; 4], 2, -1.0).is_err());
    }

    #[test]
    fn uniform_posterior_has_zero_kl() {
        let gamma1 = vec![0.25; 4 * 6];
        assert!(posterior_uniform_kl(&gamma1, 4).abs() < 1e-12);
    }

    #[test]
    fn kl_single_row_matches_hand_value() {
        let kl = posterior_uniform_kl(&[0.9, 0.1], 2);
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expect).abs() < 1e-10);
        assert!((kl - 0.51083).abs() < 1e-5);
    }

    #[test]
    fn kl_clamps_zero_probabilities() {
        let kl = posterior_uniform_kl(&[1.0, 0.0], 2);
        let expect = 0.5 * (0.5f64 / 1.0).ln() + 0.5 * (0.5f64 / 1e-12).ln();
        assert!(kl.is_finite());
        assert!((kl - expect).abs() < 1e-9);
    }
}
