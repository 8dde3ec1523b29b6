//! Network building blocks: linear maps, MLPs, GRU cells, and
//! diagonal-Gaussian densities, all recorded on a [`Graph`].
//!
//! Each block splits into a `*Params` half (parameter ids in a
//! [`ParamStore`], created once) and a `*Nodes` half (tensor handles bound
//! into one graph for the duration of a forward pass).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Shape, TensorId};
use crate::nn::params::{ParamId, ParamStore};

/// `ln(2 * pi)`
pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(&self, g: &mut Graph, x: TensorId) -> TensorId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Layer widths and per-layer activations for a multilayer perceptron.
///
/// `widths[0]` is the input dimension; every following width adds one
/// affine layer. The output layer defaults to identity activation.
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// Hidden layers share `hidden` activation; the output layer is identity.
    pub fn new(widths: Vec<usize>, hidden: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config(
                "an MLP needs an input width and at least one layer",
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("MLP layer widths must be positive"));
        }
        let n_layers = widths.len() - 1;
        let mut activations = vec![hidden; n_layers];
        activations[n_layers - 1] = Activation::Identity;
        Ok(MlpSpec {
            widths,
            activations,
        })
    }

    pub fn with_output_activation(mut self, act: Activation) -> Self {
        let n = self.activations.len();
        self.activations[n - 1] = act;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl MlpParams {
    pub fn init(store: &mut ParamStore, prefix: &str, spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let mut weights = Vec::with_capacity(spec.num_layers());
        let mut biases = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
            weights.push(store.add_glorot(&format!("{prefix}.w{l}"), fan_out, fan_in, rng));
            biases.push(store.add_zeros(&format!("{prefix}.b{l}"), Shape::vector(fan_out)));
        }
        MlpParams {
            spec,
            weights,
            biases,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> MlpNodes {
        MlpNodes {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(|&p| g.param(store, p)).collect(),
            biases: self.biases.iter().map(|&p| g.param(store, p)).collect(),
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }
}

#[derive(Clone)]
pub struct MlpNodes {
    pub spec: MlpSpec,
    pub weights: Vec<TensorId>,
    pub biases: Vec<TensorId>,
}

/// Forward pass through an MLP; the input must be a row vector matching the
/// first layer width.
pub fn mlp_forward(g: &mut Graph, mlp: &MlpNodes, input: TensorId) -> Result<TensorId> {
    let got = g.shape_of(input);
    if got.rows != 1 || got.cols != mlp.spec.input_dim() {
        return Err(Error::config(format!(
            "MLP expects a {}-dim input row, got {:?}",
            mlp.spec.input_dim(),
            got
        )));
    }
    let mut h = input;
    for l in 0..mlp.spec.num_layers() {
        let pre = g.affine(mlp.weights[l], h, mlp.biases[l]);
        h = mlp.spec.activations[l].apply(g, pre);
    }
    Ok(h)
}

/// Gated recurrent unit parameters (standard Cho et al. update equations):
///
/// ```text
/// u = sigmoid(Wu x + Uu h + bu)          update gate
/// r = sigmoid(Wr x + Ur h + br)          reset gate
/// c = tanh(Wc x + Uc (r .* h) + bc)      candidate
/// h' = (1 - u) .* h + u .* c
/// ```
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: ParamId,
    pub w_reset: ParamId,
    pub w_cand: ParamId,
    pub u_update: ParamId,
    pub u_reset: ParamId,
    pub u_cand: ParamId,
    pub b_update: ParamId,
    pub b_reset: ParamId,
    pub b_cand: ParamId,
}

impl GruParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (e, h) = (input_dim, hidden_dim);
        GruParams {
            input_dim: e,
            hidden_dim: h,
            w_update: store.add_glorot(&format!("{prefix}.w_update"), h, e, rng),
            w_reset: store.add_glorot(&format!("{prefix}.w_reset"), h, e, rng),
            w_cand: store.add_glorot(&format!("{prefix}.w_cand"), h, e, rng),
            u_update: store.add_glorot(&format!("{prefix}.u_update"), h, h, rng),
            u_reset: store.add_glorot(&format!("{prefix}.u_reset"), h, h, rng),
            u_cand: store.add_glorot(&format!("{prefix}.u_cand"), h, h, rng),
            b_update: store.add_zeros(&format!("{prefix}.b_update"), Shape::vector(h)),
            b_reset: store.add_zeros(&format!("{prefix}.b_reset"), Shape::vector(h)),
            b_cand: store.add_zeros(&format!("{prefix}.b_cand"), Shape::vector(h)),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> GruNodes {
        GruNodes {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_update: g.param(store, self.w_update),
            w_reset: g.param(store, self.w_reset),
            w_cand: g.param(store, self.w_cand),
            u_update: g.param(store, self.u_update),
            u_reset: g.param(store, self.u_reset),
            u_cand: g.param(store, self.u_cand),
            b_update: g.param(store, self.b_update),
            b_reset: g.param(store, self.b_reset),
            b_cand: g.param(store, self.b_cand),
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        [
            self.w_update,
            self.w_reset,
            self.w_cand,
            self.u_update,
            self.u_reset,
            self.u_cand,
            self.b_update,
            self.b_reset,
            self.b_cand,
        ]
        .into_iter()
    }
}

#[derive(Clone, Copy)]
pub struct GruNodes {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: TensorId,
    pub w_reset: TensorId,
    pub w_cand: TensorId,
    pub u_update: TensorId,
    pub u_reset: TensorId,
    pub u_cand: TensorId,
    pub b_update: TensorId,
    pub b_reset: TensorId,
    pub b_cand: TensorId,
}

impl GruNodes {
    pub fn zero_state(&self, g: &mut Graph) -> TensorId {
        let zeros = vec![0.0; self.hidden_dim];
        g.row(&zeros)
    }
}

/// One GRU step. `state` and `input` are row vectors.
pub fn gru_step(
    g: &mut Graph,
    cell: &GruNodes,
    state: TensorId,
    input: TensorId,
) -> Result<TensorId> {
    let ss = g.shape_of(state);
    let si = g.shape_of(input);
    if ss != Shape::vector(cell.hidden_dim) || si != Shape::vector(cell.input_dim) {
        return Err(Error::config(format!(
            "GRU expects state ({},) and input ({},), got {ss:?} and {si:?}",
            cell.hidden_dim, cell.input_dim
        )));
    }
    Ok(g.gru_cell(crate::nn::graph::GruIds {
        w_update: cell.w_update,
        w_reset: cell.w_reset,
        w_cand: cell.w_cand,
        u_update: cell.u_update,
        u_reset: cell.u_reset,
        u_cand: cell.u_cand,
        b_update: cell.b_update,
        b_reset: cell.b_reset,
        b_cand: cell.b_cand,
        state,
        input,
    }))
}

/// Affine map `y = W x + b`.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        LinearParams {
            input_dim,
            output_dim,
            weight: store.add_glorot(&format!("{prefix}.w"), output_dim, input_dim, rng),
            bias: store.add_zeros(&format!("{prefix}.b"), Shape::vector(output_dim)),
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> LinearNodes {
        LinearNodes {
            weight: g.param(store, self.weight),
            bias: g.param(store, self.bias),
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        [self.weight, self.bias].into_iter()
    }
}

#[derive(Clone, Copy)]
pub struct LinearNodes {
    pub weight: TensorId,
    pub bias: TensorId,
}

pub fn linear_forward(g: &mut Graph, lin: &LinearNodes, input: TensorId) -> TensorId {
    g.affine(lin.weight, input, lin.bias)
}

/// Log density of `x` under a diagonal Gaussian with the given mean and
/// log standard deviations:
/// `sum_d [ -0.5 ln(2 pi) - log_scale_d - 0.5 ((x_d - mean_d) / sigma_d)^2 ]`.
pub fn gaussian_log_prob(
    g: &mut Graph,
    x: TensorId,
    mean: TensorId,
    log_scale: TensorId,
) -> Result<TensorId> {
    let d = g.shape_of(x).len();
    if g.shape_of(mean).len() != d || g.shape_of(log_scale).len() != d {
        return Err(Error::config(format!(
            "gaussian_log_prob dimension mismatch: x {d}, mean {}, log_scale {}",
            g.shape_of(mean).len(),
            g.shape_of(log_scale).len()
        )));
    }
    for id in [x, mean, log_scale] {
        if g.values(id).iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite input to gaussian_log_prob"));
        }
    }
    Ok(g.gauss_log_prob(x, mean, log_scale))
}

/// Entropy of a diagonal Gaussian:
/// `sum_d [ 0.5 (1 + ln(2 pi)) + log_scale_d ]`.
pub fn gaussian_entropy(g: &mut Graph, log_scale: TensorId) -> Result<TensorId> {
    if g.values(log_scale).iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite input to gaussian_entropy"));
    }
    let d = g.shape_of(log_scale).len();
    let s = g.sum(log_scale);
    Ok(g.add_scalar(s, 0.5 * (1.0 + LN_2PI) * d as f64))
}
