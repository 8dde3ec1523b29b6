//! Per-sequence training objectives.
//!
//! The marginalized path samples a latent trajectory from the inference
//! network, sums the discrete states out exactly, and maximizes
//! `surrogate + entropy - beta * ce`: the surrogate carries the gradient of
//! the collapsed log-likelihood, the analytic entropy completes the bound,
//! and the posterior-uniformity penalty keeps early training from
//! abandoning states.
//!
//! The relaxed baseline path instead samples soft one-hot states from a
//! Gumbel-Softmax posterior and evaluates the joint density with
//! state-weighted mixtures, so the bound stays differentiable without any
//! marginalization.

use rand::Rng;

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::hmm::{ce_regularizer, forward_backward, surrogate_loss, DiscretePosterior};
use crate::inference::{encode, sample_posterior, InferenceParams};
use crate::model::{
    build_potentials, discrete_log_transition, emission_logprob, transition_logprob,
    GenerativeParams,
};
use crate::nn::{gaussian_log_prob, mlp_forward, Graph, MlpParams, ParamStore, TensorId};

/// Pieces of the marginalized objective for one sequence.
pub struct ElboTerms {
    /// Marginal-weighted sum of log potentials (gradient of the collapsed
    /// log-likelihood).
    pub surrogate: TensorId,
    /// Analytic entropy of the variational posterior.
    pub entropy: TensorId,
    /// Differentiable posterior-vs-uniform KL.
    pub ce: TensorId,
    /// Collapsed log-likelihood estimate `log sum_s p(x, z~, s)`.
    pub log_z: f64,
    pub posterior: DiscretePosterior,
}

/// Run the full marginalized pipeline for one sequence: encode, sample the
/// latent trajectory with the supplied noise, build potentials at the given
/// transition temperature, marginalize, and assemble the objective terms.
pub fn elbo_terms(
    g: &mut Graph,
    store: &ParamStore,
    gen: &GenerativeParams,
    inf: &InferenceParams,
    traj: &Trajectory,
    noise: &[Vec<f64>],
    tau: f64,
) -> Result<ElboTerms> {
    if traj.obs_dim != gen.config.obs_dim {
        return Err(Error::config(format!(
            "trajectory dimension {} does not match the model ({})",
            traj.obs_dim, gen.config.obs_dim
        )));
    }
    let gen_nodes = gen.bind(g, store);
    let inf_nodes = inf.bind(g, store);
    let x: Vec<TensorId> = (0..traj.steps).map(|t| g.row(traj.row(t))).collect();

    let features = encode(g, &inf_nodes, &x)?;
    let sample = sample_posterior(g, &inf_nodes, &features, noise)?;
    let pot_nodes = build_potentials(g, &gen_nodes, &x, &sample.z, tau)?;
    let pot = pot_nodes.detach(g)?;
    let posterior = forward_backward(&pot)?;
    let surrogate = surrogate_loss(g, &pot_nodes, &posterior)?;
    let ce = ce_regularizer(g, &pot_nodes);

    Ok(ElboTerms {
        surrogate,
        entropy: sample.entropy,
        ce,
        log_z: posterior.log_z,
        posterior,
    })
}

/// Value of the marginalized objective `log_z + entropy - beta * ce`,
/// recomputed from scratch. This is the function the surrogate's gradient
/// must match under finite differences with frozen noise.
pub fn collapsed_objective_value(
    store: &ParamStore,
    gen: &GenerativeParams,
    inf: &InferenceParams,
    traj: &Trajectory,
    noise: &[Vec<f64>],
    tau: f64,
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let terms = elbo_terms(&mut g, store, gen, inf, traj, noise, tau)?;
    let entropy = g.value_scalar(terms.entropy);
    let ce = g.value_scalar(terms.ce);
    Ok(terms.log_z + entropy - beta * ce)
}

// ---------------------------------------------------------------------------
// Gumbel-Softmax baseline
// ---------------------------------------------------------------------------

/// Extra inference head for the relaxed baseline: a feedforward network
/// from `[h^x_t, s_{t-1}]` to state logits.
#[derive(Clone, Debug)]
pub struct GumbelHeadParams {
    pub net: MlpParams,
}

impl GumbelHeadParams {
    pub fn init(
        store: &mut ParamStore,
        feature_dim: usize,
        num_states: usize,
        hidden: &[usize],
        activation: crate::nn::Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut widths = vec![feature_dim + num_states];
        widths.extend_from_slice(hidden);
        widths.push(num_states);
        Ok(GumbelHeadParams {
            net: MlpParams::init(
                store,
                "inf.state_head",
                crate::nn::MlpSpec::new(widths, activation)?,
                rng,
            ),
        })
    }
}

/// One draw from the Gumbel-Softmax relaxation of a categorical with the
/// given logits: `softmax((logits + g) / tau)` with `g` standard Gumbel.
pub fn sample_gumbel_softmax(logits: &[f64], tau: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::usage(format!("temperature must be positive, got {tau}")));
    }
    let gumbels: Vec<f64> = logits.iter().map(|_| standard_gumbel(rng)).collect();
    let mut scaled: Vec<f64> = logits
        .iter()
        .zip(&gumbels)
        .map(|(l, g)| (l + g) / tau)
        .collect();
    let z = crate::nn::lse_slice(&scaled);
    for v in scaled.iter_mut() {
        *v = (*v - z).exp();
    }
    Ok(scaled)
}

/// Standard Gumbel(0, 1) draw.
pub fn standard_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Pieces of the relaxed objective for one sequence.
pub struct GumbelTerms {
    /// `log p(x, z~, s~) + H(q_z) - log q(s~)`, the quantity to maximize.
    pub objective: TensorId,
    /// Relaxed joint log-density, for monitoring.
    pub log_joint: f64,
}

/// Relaxed objective: recursively sample soft states from the
/// Gumbel-Softmax posterior, weight the per-state densities by the soft
/// assignments, and subtract the state posterior's log-mass.
///
/// `gumbel_noise[t]` supplies the standard Gumbel draws for step `t`.
pub fn gumbel_elbo_terms(
    g: &mut Graph,
    store: &ParamStore,
    gen: &GenerativeParams,
    inf: &InferenceParams,
    head: &GumbelHeadParams,
    traj: &Trajectory,
    noise: &[Vec<f64>],
    gumbel_noise: &[Vec<f64>],
    relax_tau: f64,
    trans_tau: f64,
) -> Result<GumbelTerms> {
    if relax_tau <= 0.0 {
        return Err(Error::usage("relaxation temperature must be positive"));
    }
    let k = gen.config.num_states;
    if gumbel_noise.len() != traj.steps || gumbel_noise.iter().any(|r| r.len() != k) {
        return Err(Error::usage("gumbel noise must be T rows of K draws"));
    }

    let gen_nodes = gen.bind(g, store);
    let inf_nodes = inf.bind(g, store);
    let head_nodes = head.net.bind(g, store);
    let x: Vec<TensorId> = (0..traj.steps).map(|t| g.row(traj.row(t))).collect();

    let features = encode(g, &inf_nodes, &x)?;
    let sample = sample_posterior(g, &inf_nodes, &features, noise)?;

    let mut log_p_terms = Vec::new();
    let mut log_qs_terms = Vec::new();
    let mut s_prev: Option<TensorId> = None;
    let mut y_all = Vec::with_capacity(traj.steps);
    for t in 0..traj.steps {
        // Posterior over s_t given the features and the previous soft state.
        let prev = match s_prev {
            Some(y) => y,
            None => {
                let zeros = vec![0.0; k];
                g.row(&zeros)
            }
        };
        let head_in = g.concat(&[features[t], prev]);
        let logits = mlp_forward(g, &head_nodes, head_in)?;
        let gumbels = g.row(&gumbel_noise[t]);
        let shifted = g.add(logits, gumbels);
        let tempered = g.scale(shifted, 1.0 / relax_tau);
        let y = g.softmax(tempered);
        // log q(s_t = y) approximated by the categorical mass at the soft
        // assignment.
        let log_q_row = g.log_softmax(logits);
        log_qs_terms.push(g.dot(y, log_q_row));
        y_all.push(y);
        s_prev = Some(y);
    }

    for t in 0..traj.steps {
        let emit = emission_logprob(g, &gen_nodes, x[t], sample.z[t])?;
        log_p_terms.push(emit);
        // State-weighted continuous density.
        let mut per_state = Vec::with_capacity(k);
        for state in 0..k {
            let lp = if t == 0 {
                gaussian_log_prob(
                    g,
                    sample.z[0],
                    gen_nodes.init_means[state],
                    gen_nodes.init_scale,
                )?
            } else {
                transition_logprob(g, &gen_nodes, sample.z[t], sample.z[t - 1], state)?
            };
            per_state.push(lp);
        }
        let lp_vec = g.concat(&per_state);
        log_p_terms.push(g.dot(y_all[t], lp_vec));
        // Discrete transition mass.
        if t == 0 {
            let log_init = g.log_softmax(gen_nodes.init_logits);
            log_p_terms.push(g.dot(y_all[0], log_init));
        } else {
            let log_a = discrete_log_transition(g, &gen_nodes, x[t - 1], trans_tau)?;
            let a_y = g.matvec(log_a, y_all[t]);
            log_p_terms.push(g.dot(y_all[t - 1], a_y));
        }
    }

    let log_p = g.add_n(&log_p_terms);
    let log_qs = g.add_n(&log_qs_terms);
    let with_entropy = g.add(log_p, sample.entropy);
    let objective = g.sub(with_entropy, log_qs);
    Ok(GumbelTerms {
        objective,
        log_joint: g.value_scalar(log_p),
    })
}
