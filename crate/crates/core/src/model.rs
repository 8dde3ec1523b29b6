//! Generative model: Gaussian emission, per-state continuous transitions,
//! and observation-conditioned discrete transitions.
//!
//! The joint density over a length-`T` sequence factorizes as
//!
//! ```text
//! p(x, z, s) = p(x_1|z_1) p(z_1|s_1) p(s_1)
//!              prod_{t>=2} p(x_t|z_t) p(z_t|z_{t-1}, s_t) p(s_t|s_{t-1}, x_{t-1})
//! ```
//!
//! with `p(x_t|z_t) = N(f_x(z_t), diag R)`, `p(z_t|z_{t-1}, s_t=k) =
//! N(f_k(z_{t-1}), diag Q)`, and discrete transition rows given by a tempered
//! softmax over network logits. With the continuous trajectory treated as
//! evidence, [`build_potentials`] packages these densities as HMM potentials
//! for the marginalizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hmm::PotentialNodes;
use crate::nn::{
    gaussian_log_prob, gru_step, linear_forward, mlp_forward, Activation, Graph, GruNodes,
    GruParams, LinearNodes, LinearParams, MlpNodes, MlpParams, MlpSpec, ParamId, ParamStore,
    Shape, TensorId,
};

/// Family of the per-state continuous transition function.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TransitionFamily {
    /// Affine maps; the switching linear ablation.
    Linear,
    /// MLP with configurable hidden widths.
    Mlp,
    /// GRU cell driven by the previous latent, followed by a linear readout.
    Gru,
}

/// What the discrete transition network conditions on.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DiscreteInput {
    /// Logits are a function of the previous observation.
    PrevObservation,
    /// A single learned logit table; transitions ignore the observations.
    None,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Number of discrete states `K`.
    pub num_states: usize,
    /// Continuous latent dimension `H`.
    pub latent_dim: usize,
    /// Observation dimension `D`.
    pub obs_dim: usize,
    pub transition_family: TransitionFamily,
    pub discrete_input: DiscreteInput,
    /// Hidden widths of the emission MLP (`H -> ... -> D`).
    pub emission_hidden: Vec<usize>,
    /// Hidden widths of MLP-family transitions (`H -> ... -> H`).
    pub transition_hidden: Vec<usize>,
    /// GRU width for GRU-family transitions.
    pub transition_gru_units: usize,
    /// Hidden widths of the discrete transition net (`D -> ... -> K*K`).
    pub discrete_hidden: Vec<usize>,
    /// Activation for all hidden layers.
    pub hidden_activation: Activation,
    /// Initial log standard deviation of the emission noise.
    pub init_obs_log_scale: f64,
    /// Initial log standard deviation of the transition noise.
    pub init_trans_log_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_states < 1 || self.latent_dim < 1 || self.obs_dim < 1 {
            return Err(Error::config("K, H and D must all be at least 1"));
        }
        if self.transition_family == TransitionFamily::Gru && self.transition_gru_units == 0 {
            return Err(Error::config("GRU transitions need a positive unit count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum TransitionParams {
    Linear(LinearParams),
    Mlp(MlpParams),
    Gru {
        cell: GruParams,
        readout: LinearParams,
    },
}

impl TransitionParams {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            TransitionParams::Linear(l) => l.param_ids().collect(),
            TransitionParams::Mlp(m) => m.param_ids().collect(),
            TransitionParams::Gru { cell, readout } => {
                cell.param_ids().chain(readout.param_ids()).collect()
            }
        }
    }
}

pub enum TransitionNodes {
    Linear(LinearNodes),
    Mlp(MlpNodes),
    Gru { cell: GruNodes, readout: LinearNodes },
}

#[derive(Clone, Debug)]
pub enum DiscreteParams {
    /// MLP from the previous observation to `K*K` logits.
    Net(MlpParams),
    /// Learned `K x K` logit table.
    Table(ParamId),
}

pub enum DiscreteNodes {
    Net(MlpNodes),
    Table(TensorId),
}

/// All learnable parameters of the generative side.
#[derive(Clone, Debug)]
pub struct GenerativeParams {
    pub config: ModelConfig,
    pub emission: MlpParams,
    /// Log standard deviations of the emission noise (diagonal `R`).
    pub log_obs_scale: ParamId,
    pub transitions: Vec<TransitionParams>,
    /// Log standard deviations of the transition noise (diagonal `Q`),
    /// shared across states.
    pub log_trans_scale: ParamId,
    pub discrete: DiscreteParams,
    /// Per-state mean of the initial latent distribution.
    pub init_means: Vec<ParamId>,
    /// Logits of the initial discrete distribution.
    pub init_logits: ParamId,
}

impl GenerativeParams {
    pub fn init(store: &mut ParamStore, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (k, h, d) = (config.num_states, config.latent_dim, config.obs_dim);
        let act = config.hidden_activation;

        let mut emission_widths = vec![h];
        emission_widths.extend_from_slice(&config.emission_hidden);
        emission_widths.push(d);
        let emission = MlpParams::init(store, "gen.emission", MlpSpec::new(emission_widths, act)?, rng);

        let mut transitions = Vec::with_capacity(k);
        for state in 0..k {
            let prefix = format!("gen.trans{state}");
            let t = match config.transition_family {
                TransitionFamily::Linear => {
                    TransitionParams::Linear(LinearParams::init(store, &prefix, h, h, rng))
                }
                TransitionFamily::Mlp => {
                    let mut widths = vec![h];
                    widths.extend_from_slice(&config.transition_hidden);
                    widths.push(h);
                    TransitionParams::Mlp(MlpParams::init(
                        store,
                        &prefix,
                        MlpSpec::new(widths, act)?,
                        rng,
                    ))
                }
                TransitionFamily::Gru => {
                    let units = config.transition_gru_units;
                    TransitionParams::Gru {
                        cell: GruParams::init(store, &format!("{prefix}.cell"), h, units, rng),
                        readout: LinearParams::init(
                            store,
                            &format!("{prefix}.readout"),
                            units,
                            h,
                            rng,
                        ),
                    }
                }
            };
            transitions.push(t);
        }

        let discrete = match config.discrete_input {
            DiscreteInput::PrevObservation => {
                let mut widths = vec![d];
                widths.extend_from_slice(&config.discrete_hidden);
                widths.push(k * k);
                DiscreteParams::Net(MlpParams::init(
                    store,
                    "gen.discrete",
                    MlpSpec::new(widths, act)?,
                    rng,
                ))
            }
            DiscreteInput::None => {
                DiscreteParams::Table(store.add_zeros("gen.discrete.table", Shape::matrix(k, k)))
            }
        };

        let init_means = (0..k)
            .map(|s| store.add_zeros(&format!("gen.init_mean{s}"), Shape::vector(h)))
            .collect();

        let log_obs_scale = store.add_const(
            "gen.log_obs_scale",
            Shape::vector(d),
            config.init_obs_log_scale,
        );
        let log_trans_scale = store.add_const(
            "gen.log_trans_scale",
            Shape::vector(h),
            config.init_trans_log_scale,
        );
        Ok(GenerativeParams {
            config,
            emission,
            log_obs_scale,
            transitions,
            log_trans_scale,
            discrete,
            init_means,
            init_logits: store.add_zeros("gen.init_logits", Shape::vector(k)),
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> GenerativeNodes {
        GenerativeNodes {
            num_states: self.config.num_states,
            latent_dim: self.config.latent_dim,
            obs_dim: self.config.obs_dim,
            emission: self.emission.bind(g, store),
            log_obs_scale: g.param(store, self.log_obs_scale),
            transitions: self
                .transitions
                .iter()
                .map(|t| match t {
                    TransitionParams::Linear(l) => TransitionNodes::Linear(l.bind(g, store)),
                    TransitionParams::Mlp(m) => TransitionNodes::Mlp(m.bind(g, store)),
                    TransitionParams::Gru { cell, readout } => TransitionNodes::Gru {
                        cell: cell.bind(g, store),
                        readout: readout.bind(g, store),
                    },
                })
                .collect(),
            log_trans_scale: g.param(store, self.log_trans_scale),
            discrete: match &self.discrete {
                DiscreteParams::Net(m) => DiscreteNodes::Net(m.bind(g, store)),
                DiscreteParams::Table(p) => DiscreteNodes::Table(g.param(store, *p)),
            },
            init_means: self.init_means.iter().map(|&p| g.param(store, p)).collect(),
            init_scale: g.row(&vec![0.0; self.config.latent_dim]),
            init_logits: g.param(store, self.init_logits),
        }
    }

    /// Parameter ids of the per-state transition function for one state,
    /// in a fixed order, for the weight-correlation diagnostic.
    pub fn transition_param_ids(&self, state: usize) -> Vec<ParamId> {
        self.transitions[state].param_ids()
    }
}

/// Per-graph tensor bindings of [`GenerativeParams`].
pub struct GenerativeNodes {
    pub num_states: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub emission: MlpNodes,
    pub log_obs_scale: TensorId,
    pub transitions: Vec<TransitionNodes>,
    pub log_trans_scale: TensorId,
    pub discrete: DiscreteNodes,
    pub init_means: Vec<TensorId>,
    /// Unit log-scale of the initial latent distribution (fixed). A learned
    /// scale here collapses together with the dynamics noise and turns the
    /// first-step evidence into a near-delta, which plants a spurious state
    /// flip after the first frame of almost every sequence.
    pub init_scale: TensorId,
    pub init_logits: TensorId,
}

/// `log N(x_t; f_x(z_t), diag R)`.
pub fn emission_logprob(
    g: &mut Graph,
    gen: &GenerativeNodes,
    x_t: TensorId,
    z_t: TensorId,
) -> Result<TensorId> {
    if g.shape_of(x_t) != Shape::vector(gen.obs_dim) {
        return Err(Error::config(format!(
            "emission expects a {}-dim observation",
            gen.obs_dim
        )));
    }
    let mean = mlp_forward(g, &gen.emission, z_t)?;
    gaussian_log_prob(g, x_t, mean, gen.log_obs_scale)
}

/// Mean of `p(z_t | z_{t-1}, s_t = k)` under the state-`k` transition.
pub fn transition_mean(
    g: &mut Graph,
    gen: &GenerativeNodes,
    z_prev: TensorId,
    state: usize,
) -> Result<TensorId> {
    match &gen.transitions[state] {
        TransitionNodes::Linear(l) => Ok(linear_forward(g, l, z_prev)),
        TransitionNodes::Mlp(m) => mlp_forward(g, m, z_prev),
        TransitionNodes::Gru { cell, readout } => {
            let zero = cell.zero_state(g);
            let h = gru_step(g, cell, zero, z_prev)?;
            Ok(linear_forward(g, readout, h))
        }
    }
}

/// `log N(z_t; f_k(z_{t-1}), diag Q)`.
pub fn transition_logprob(
    g: &mut Graph,
    gen: &GenerativeNodes,
    z_t: TensorId,
    z_prev: TensorId,
    state: usize,
) -> Result<TensorId> {
    if state >= gen.num_states {
        return Err(Error::usage(format!(
            "state index {state} out of range (K = {})",
            gen.num_states
        )));
    }
    let mean = transition_mean(g, gen, z_prev, state)?;
    gaussian_log_prob(g, z_t, mean, gen.log_trans_scale)
}

/// Raw `K x K` logits of the discrete transition given the previous
/// observation (row = source state, column = destination state).
fn discrete_logits(g: &mut Graph, gen: &GenerativeNodes, x_prev: TensorId) -> Result<TensorId> {
    let k = gen.num_states;
    match &gen.discrete {
        DiscreteNodes::Net(net) => {
            let flat = mlp_forward(g, net, x_prev)?;
            // Reinterpret the K*K row as a K x K matrix.
            Ok(g.reshape(flat, Shape::matrix(k, k)))
        }
        DiscreteNodes::Table(t) => Ok(*t),
    }
}

/// Row-wise log of the tempered transition matrix,
/// `log softmax(logits / tau)` per source row.
pub fn discrete_log_transition(
    g: &mut Graph,
    gen: &GenerativeNodes,
    x_prev: TensorId,
    tau: f64,
) -> Result<TensorId> {
    if tau <= 0.0 {
        return Err(Error::usage(format!("temperature must be positive, got {tau}")));
    }
    let logits = discrete_logits(g, gen, x_prev)?;
    let scaled = g.scale(logits, 1.0 / tau);
    Ok(g.log_softmax(scaled))
}

/// Row-stochastic tempered transition matrix (differentiable).
pub fn discrete_transition_matrix(
    g: &mut Graph,
    gen: &GenerativeNodes,
    x_prev: TensorId,
    tau: f64,
) -> Result<TensorId> {
    let log_a = discrete_log_transition(g, gen, x_prev, tau)?;
    Ok(g.exp(log_a))
}

/// Assemble the HMM potentials for an observed sequence `x` and a sampled
/// latent trajectory `z` (both length `T`):
///
/// * evidence at the first step: `log p(x_1|z_1) + log p(z_1|s_1=k)` with a
///   per-state Gaussian initial latent prior sharing the transition scales;
/// * evidence at later steps: `log p(x_t|z_t) + log p(z_t|z_{t-1}, s_t=k)`;
/// * tempered transition matrices conditioned on the previous observation.
pub fn build_potentials(
    g: &mut Graph,
    gen: &GenerativeNodes,
    x: &[TensorId],
    z: &[TensorId],
    tau: f64,
) -> Result<PotentialNodes> {
    let t_len = x.len();
    if t_len == 0 {
        return Err(Error::config("build_potentials needs T >= 1"));
    }
    if z.len() != t_len {
        return Err(Error::config(format!(
            "observation/latent length mismatch: {t_len} vs {}",
            z.len()
        )));
    }
    let k = gen.num_states;

    let log_init = g.log_softmax(gen.init_logits);

    let mut log_obs = Vec::with_capacity(t_len);
    let mut scalars = Vec::with_capacity(k);
    for t in 0..t_len {
        let emit = emission_logprob(g, gen, x[t], z[t])?;
        scalars.clear();
        for state in 0..k {
            let trans = if t == 0 {
                gaussian_log_prob(g, z[0], gen.init_means[state], gen.init_scale)?
            } else {
                transition_logprob(g, gen, z[t], z[t - 1], state)?
            };
            scalars.push(g.add(emit, trans));
        }
        log_obs.push(g.concat(&scalars));
    }

    let mut log_trans = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        log_trans.push(discrete_log_transition(g, gen, x[t], tau)?);
    }

    Ok(PotentialNodes {
        num_states: k,
        log_init,
        log_trans,
        log_obs,
    })
}
