//! Minimal tensor arithmetic with reverse-mode differentiation, plus the
//! small network blocks the rest of the crate is built from.

pub mod graph;
pub mod layers;
pub mod params;

pub use graph::{lse_slice, GradientMap, Graph, Shape, TensorId};
pub use layers::{
    gaussian_entropy, gaussian_log_prob, gru_step, linear_forward, mlp_forward, Activation,
    GruNodes, GruParams, LinearNodes, LinearParams, MlpNodes, MlpParams, MlpSpec, LN_2PI,
};
pub use params::{ParamEntry, ParamId, ParamStore};
