//! Dense-tensor arithmetic with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! and gradient accumulators for all nodes live in two flat `f64` arenas so
//! that clearing the graph between training steps performs no allocation in
//! steady state. Nodes are appended in construction order, which is a valid
//! topological order; [`Graph::backward`] walks it in reverse.
//!
//! Tensors are at most two-dimensional: scalars are `(1, 1)`, vectors are
//! single rows `(1, n)`, and matrices are `(rows, cols)` in row-major order.
//! Higher-rank quantities (per-timestep potentials and the like) are kept as
//! collections of node handles by the callers.
//!
//! Shape mismatches in graph operations are programming errors and panic;
//! the public model-level operations validate their inputs and return
//! `Result` instead.

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(u32);

/// Tensor extent: `(rows, cols)`, row-major storage.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }

    pub fn vector(n: usize) -> Self {
        Shape { rows: 1, cols: n }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Shape as a dimension list: `[n]` for rows of 1, `[rows, cols]` otherwise.
    pub fn dims(&self) -> Vec<usize> {
        if self.rows == 1 {
            vec![self.cols]
        } else {
            vec![self.rows, self.cols]
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    /// `W (m,n) * x (1,n) -> (1,m)`
    MatVec(TensorId, TensorId),
    Tanh(TensorId),
    Sigmoid(TensorId),
    Relu(TensorId),
    Exp(TensorId),
    /// Sum of all entries -> scalar.
    Sum(TensorId),
    Dot(TensorId, TensorId),
    /// Concatenate row vectors (and scalars) into one row vector.
    Concat(Vec<TensorId>),
    /// Sum of scalar nodes -> scalar.
    AddN(Vec<TensorId>),
    /// Inner product with a constant weight vector -> scalar.
    WeightedSum(TensorId, Vec<f64>),
    /// Same entries, new extent.
    Reshape(TensorId),
    /// log(sum(exp(x))) over all entries -> scalar.
    LogSumExp(TensorId),
    /// Row-wise log-softmax.
    LogSoftmax(TensorId),
    /// `out[k] = logsumexp_j(prev[j] + trans[j,k])`; forward HMM message.
    LseMatVec { trans: TensorId, prev: TensorId },
    /// `out[j] = logsumexp_k(trans[j,k] + next[k])`; backward HMM message.
    LseMatVecT { trans: TensorId, next: TensorId },
    /// Fused affine map `W x + b`.
    Affine {
        w: TensorId,
        x: TensorId,
        b: TensorId,
    },
    /// Fused gated-recurrent-unit step; see [`Graph::gru_cell`].
    Gru(Box<GruFused>),
    /// Fused diagonal-Gaussian log density -> scalar.
    GaussLogProb {
        x: TensorId,
        mean: TensorId,
        log_scale: TensorId,
    },
}

/// Operand bundle of the fused GRU step.
#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub w_update: TensorId,
    pub w_reset: TensorId,
    pub w_cand: TensorId,
    pub u_update: TensorId,
    pub u_reset: TensorId,
    pub u_cand: TensorId,
    pub b_update: TensorId,
    pub b_reset: TensorId,
    pub b_cand: TensorId,
    pub state: TensorId,
    pub input: TensorId,
}

/// GRU operands plus the arena slot of the cached gate activations
/// (update, reset, candidate: three `h`-vectors back to back).
#[derive(Clone, Copy, Debug)]
struct GruFused {
    ids: GruIds,
    cache_off: usize,
}

struct Node {
    shape: Shape,
    offset: usize,
    op: Op,
}

/// Recording tape for reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    data: Vec<f64>,
    grad: Vec<f64>,
    scratch: Vec<f64>,
    bindings: Vec<(ParamId, TensorId)>,
    /// Saved gate activations for fused-op backward passes.
    cache: Vec<f64>,
    // Reusable working buffers for the fused GRU kernels.
    buf_update: Vec<f64>,
    buf_reset: Vec<f64>,
    buf_cand: Vec<f64>,
    buf_d1: Vec<f64>,
    buf_d2: Vec<f64>,
    buf_d3: Vec<f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            data: Vec::new(),
            grad: Vec::new(),
            scratch: Vec::new(),
            bindings: Vec::new(),
            cache: Vec::new(),
            buf_update: Vec::new(),
            buf_reset: Vec::new(),
            buf_cand: Vec::new(),
            buf_d1: Vec::new(),
            buf_d2: Vec::new(),
            buf_d3: Vec::new(),
        }
    }

    /// Drop all recorded nodes but keep allocated capacity.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.data.clear();
        self.grad.clear();
        self.bindings.clear();
        self.cache.clear();
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape_of(&self, id: TensorId) -> Shape {
        self.nodes[id.0 as usize].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        let n = &self.nodes[id.0 as usize];
        &self.data[n.offset..n.offset + n.shape.len()]
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        let v = self.values(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    /// Gradient accumulator of a node; zeros until [`Graph::backward`] runs.
    pub fn grad_of(&self, id: TensorId) -> &[f64] {
        let n = &self.nodes[id.0 as usize];
        &self.grad[n.offset..n.offset + n.shape.len()]
    }

    fn push(&mut self, shape: Shape, op: Op) -> (TensorId, usize) {
        let offset = self.data.len();
        let len = shape.len();
        self.data.resize(offset + len, 0.0);
        self.grad.resize(offset + len, 0.0);
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node { shape, offset, op });
        (id, offset)
    }

    /// Constant leaf; no gradient is reported for it.
    pub fn constant(&mut self, shape: Shape, values: &[f64]) -> TensorId {
        assert_eq!(shape.len(), values.len(), "constant shape/value mismatch");
        let (id, off) = self.push(shape, Op::Leaf);
        self.data[off..off + values.len()].copy_from_slice(values);
        id
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(Shape::scalar(), &[v])
    }

    pub fn row(&mut self, values: &[f64]) -> TensorId {
        self.constant(Shape::vector(values.len()), values)
    }

    /// Leaf bound to a stored parameter; its gradient is collected by
    /// [`Graph::param_gradients`] after the backward pass.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> TensorId {
        let entry = store.entry(pid);
        let id = self.constant(entry.shape, &entry.values);
        self.bindings.push((pid, id));
        id
    }

    // ---- elementwise and linear operations ----

    fn shape2(&self, a: TensorId, b: TensorId) -> Shape {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        assert_eq!(sa, sb, "elementwise shape mismatch: {sa:?} vs {sb:?}");
        sa
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let shape = self.shape2(a, b);
        let (id, off) = self.push(shape, Op::Add(a, b));
        let (ao, bo) = (self.offset(a), self.offset(b));
        for i in 0..shape.len() {
            self.data[off + i] = self.data[ao + i] + self.data[bo + i];
        }
        id
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let shape = self.shape2(a, b);
        let (id, off) = self.push(shape, Op::Sub(a, b));
        let (ao, bo) = (self.offset(a), self.offset(b));
        for i in 0..shape.len() {
            self.data[off + i] = self.data[ao + i] - self.data[bo + i];
        }
        id
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let shape = self.shape2(a, b);
        let (id, off) = self.push(shape, Op::Mul(a, b));
        let (ao, bo) = (self.offset(a), self.offset(b));
        for i in 0..shape.len() {
            self.data[off + i] = self.data[ao + i] * self.data[bo + i];
        }
        id
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape_of(a);
        let (id, off) = self.push(shape, Op::Neg(a));
        let ao = self.offset(a);
        for i in 0..shape.len() {
            self.data[off + i] = -self.data[ao + i];
        }
        id
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.shape_of(a);
        let (id, off) = self.push(shape, Op::Scale(a, c));
        let ao = self.offset(a);
        for i in 0..shape.len() {
            self.data[off + i] = c * self.data[ao + i];
        }
        id
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.shape_of(a);
        let (id, off) = self.push(shape, Op::AddScalar(a));
        let ao = self.offset(a);
        for i in 0..shape.len() {
            self.data[off + i] = self.data[ao + i] + c;
        }
        id
    }

    /// `W (m,n) * x (1,n) -> (1,m)`.
    pub fn matvec(&mut self, w: TensorId, x: TensorId) -> TensorId {
        let (sw, sx) = (self.shape_of(w), self.shape_of(x));
        assert_eq!(sx.rows, 1, "matvec expects a row-vector input");
        assert_eq!(sw.cols, sx.cols, "matvec shape mismatch: {sw:?} * {sx:?}");
        let (m, n) = (sw.rows, sw.cols);
        let (id, off) = self.push(Shape::vector(m), Op::MatVec(w, x));
        let (wo, xo) = (self.offset(w), self.offset(x));
        for i in 0..m {
            let mut acc = 0.0;
            let row = wo + i * n;
            for j in 0..n {
                acc += self.data[row + j] * self.data[xo + j];
            }
            self.data[off + i] = acc;
        }
        id
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.map_unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.map_unary(a, Op::Sigmoid(a), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.map_unary(a, Op::Relu(a), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.map_unary(a, Op::Exp(a), f64::exp)
    }

    fn map_unary(&mut self, a: TensorId, op: Op, f: impl Fn(f64) -> f64) -> TensorId {
        let shape = self.shape_of(a);
        let (id, off) = self.push(shape, op);
        let ao = self.offset(a);
        for i in 0..shape.len() {
            self.data[off + i] = f(self.data[ao + i]);
        }
        id
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let (id, off) = self.push(Shape::scalar(), Op::Sum(a));
        let ao = self.offset(a);
        let n = self.nodes[a.0 as usize].shape.len();
        self.data[off] = self.data[ao..ao + n].iter().sum();
        id
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let shape = self.shape2(a, b);
        let (id, off) = self.push(Shape::scalar(), Op::Dot(a, b));
        let (ao, bo) = (self.offset(a), self.offset(b));
        let mut acc = 0.0;
        for i in 0..shape.len() {
            acc += self.data[ao + i] * self.data[bo + i];
        }
        self.data[off] = acc;
        id
    }

    /// Concatenate row vectors into one row vector.
    pub fn concat(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let mut total = 0;
        for &p in parts {
            let s = self.shape_of(p);
            assert_eq!(s.rows, 1, "concat expects row vectors");
            total += s.cols;
        }
        let (id, off) = self.push(Shape::vector(total), Op::Concat(parts.to_vec()));
        let mut cursor = off;
        for &p in parts {
            let po = self.offset(p);
            let n = self.nodes[p.0 as usize].shape.len();
            for i in 0..n {
                self.data[cursor + i] = self.data[po + i];
            }
            cursor += n;
        }
        id
    }

    /// Sum of scalar nodes.
    pub fn add_n(&mut self, terms: &[TensorId]) -> TensorId {
        assert!(!terms.is_empty(), "add_n of zero terms");
        for &t in terms {
            assert!(self.shape_of(t).is_scalar(), "add_n expects scalars");
        }
        let (id, off) = self.push(Shape::scalar(), Op::AddN(terms.to_vec()));
        let mut acc = 0.0;
        for &t in terms {
            acc += self.data[self.offset(t)];
        }
        self.data[off] = acc;
        id
    }

    /// `sum_i weights[i] * a[i]` with constant weights -> scalar.
    pub fn weighted_sum(&mut self, a: TensorId, weights: &[f64]) -> TensorId {
        let shape = self.shape_of(a);
        assert_eq!(shape.len(), weights.len(), "weighted_sum length mismatch");
        let (id, off) = self.push(Shape::scalar(), Op::WeightedSum(a, weights.to_vec()));
        let ao = self.offset(a);
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w * self.data[ao + i];
        }
        self.data[off] = acc;
        id
    }

    /// Same entries under a new extent; the element count must not change.
    pub fn reshape(&mut self, a: TensorId, shape: Shape) -> TensorId {
        let sa = self.shape_of(a);
        assert_eq!(sa.len(), shape.len(), "reshape length mismatch");
        let (id, off) = self.push(shape, Op::Reshape(a));
        let ao = self.offset(a);
        for i in 0..shape.len() {
            self.data[off + i] = self.data[ao + i];
        }
        id
    }

    /// Numerically stable `log(sum(exp(x)))` over all entries -> scalar.
    pub fn logsumexp(&mut self, a: TensorId) -> TensorId {
        let (id, off) = self.push(Shape::scalar(), Op::LogSumExp(a));
        let ao = self.offset(a);
        let n = self.nodes[a.0 as usize].shape.len();
        self.data[off] = lse_slice(&self.data[ao..ao + n]);
        id
    }

    /// Row-wise log-softmax: each row of the output sums to 1 after `exp`.
    pub fn log_softmax(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape_of(a);
        let (id, off) = self.push(shape, Op::LogSoftmax(a));
        let ao = self.offset(a);
        for r in 0..shape.rows {
            let base = r * shape.cols;
            let z = lse_slice(&self.data[ao + base..ao + base + shape.cols]);
            for c in 0..shape.cols {
                self.data[off + base + c] = self.data[ao + base + c] - z;
            }
        }
        id
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Forward HMM message: `out[k] = logsumexp_j(prev[j] + trans[j,k])`.
    pub fn lse_matvec(&mut self, trans: TensorId, prev: TensorId) -> TensorId {
        let (st, sp) = (self.shape_of(trans), self.shape_of(prev));
        assert_eq!(st.rows, st.cols, "transition matrix must be square");
        assert_eq!(sp.cols, st.rows, "message length mismatch");
        let k = st.rows;
        let (id, off) = self.push(Shape::vector(k), Op::LseMatVec { trans, prev });
        let (to, po) = (self.offset(trans), self.offset(prev));
        for col in 0..k {
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..k {
                let v = self.data[po + j] + self.data[to + j * k + col];
                if v > maxv {
                    maxv = v;
                }
            }
            let mut acc = 0.0;
            for j in 0..k {
                acc += (self.data[po + j] + self.data[to + j * k + col] - maxv).exp();
            }
            self.data[off + col] = maxv + acc.ln();
        }
        id
    }

    /// Backward HMM message: `out[j] = logsumexp_k(trans[j,k] + next[k])`.
    pub fn lse_matvec_t(&mut self, trans: TensorId, next: TensorId) -> TensorId {
        let (st, sn) = (self.shape_of(trans), self.shape_of(next));
        assert_eq!(st.rows, st.cols, "transition matrix must be square");
        assert_eq!(sn.cols, st.rows, "message length mismatch");
        let k = st.rows;
        let (id, off) = self.push(Shape::vector(k), Op::LseMatVecT { trans, next });
        let (to, no) = (self.offset(trans), self.offset(next));
        for rowi in 0..k {
            let mut maxv = f64::NEG_INFINITY;
            for col in 0..k {
                let v = self.data[to + rowi * k + col] + self.data[no + col];
                if v > maxv {
                    maxv = v;
                }
            }
            let mut acc = 0.0;
            for col in 0..k {
                acc += (self.data[to + rowi * k + col] + self.data[no + col] - maxv).exp();
            }
            self.data[off + rowi] = maxv + acc.ln();
        }
        id
    }

    fn offset(&self, id: TensorId) -> usize {
        self.nodes[id.0 as usize].offset
    }

    // ---- fused operations ----

    /// Fused affine map `y = W x + b` for `W (m,n)`, `x (1,n)`, `b (1,m)`.
    pub fn affine(&mut self, w: TensorId, x: TensorId, b: TensorId) -> TensorId {
        let (sw, sx, sb) = (self.shape_of(w), self.shape_of(x), self.shape_of(b));
        assert_eq!(sx.rows, 1, "affine expects a row-vector input");
        assert_eq!(sw.cols, sx.cols, "affine shape mismatch: {sw:?} * {sx:?}");
        assert_eq!(sb, Shape::vector(sw.rows), "affine bias mismatch");
        let (m, n) = (sw.rows, sw.cols);
        let (id, off) = self.push(Shape::vector(m), Op::Affine { w, x, b });
        let (wo, xo, bo) = (self.offset(w), self.offset(x), self.offset(b));
        let (data, out) = self.data.split_at_mut(off);
        let input = &data[xo..xo + n];
        for i in 0..m {
            out[i] = data[bo + i] + dot_slices(&data[wo + i * n..wo + (i + 1) * n], input);
        }
        id
    }

    /// Fused GRU step (update/reset gates, candidate, convex combine):
    ///
    /// ```text
    /// u = sigmoid(Wu x + Uu h + bu)
    /// r = sigmoid(Wr x + Ur h + br)
    /// c = tanh(Wc x + Uc (r .* h) + bc)
    /// h' = (1 - u) .* h + u .* c
    /// ```
    pub fn gru_cell(&mut self, ids: GruIds) -> TensorId {
        let h = self.shape_of(ids.state).cols;
        let e = self.shape_of(ids.input).cols;
        debug_assert_eq!(self.shape_of(ids.w_update), Shape::matrix(h, e));
        debug_assert_eq!(self.shape_of(ids.u_update), Shape::matrix(h, h));
        let cache_off = self.cache.len();
        self.cache.resize(cache_off + 3 * h, 0.0);
        let (id, off) = self.push(Shape::vector(h), Op::Gru(Box::new(GruFused { ids, cache_off })));
        let mut update = std::mem::take(&mut self.buf_update);
        let mut reset = std::mem::take(&mut self.buf_reset);
        let mut cand = std::mem::take(&mut self.buf_cand);
        compute_gru_gates(
            &self.data,
            &self.gru_offsets(&ids),
            h,
            e,
            &mut update,
            &mut reset,
            &mut cand,
        );
        let so = self.offset(ids.state);
        for i in 0..h {
            let sv = self.data[so + i];
            self.data[off + i] = (1.0 - update[i]) * sv + update[i] * cand[i];
        }
        self.cache[cache_off..cache_off + h].copy_from_slice(&update);
        self.cache[cache_off + h..cache_off + 2 * h].copy_from_slice(&reset);
        self.cache[cache_off + 2 * h..cache_off + 3 * h].copy_from_slice(&cand);
        self.buf_update = update;
        self.buf_reset = reset;
        self.buf_cand = cand;
        id
    }

    /// Fused diagonal-Gaussian log density (see `nn::gaussian_log_prob`).
    pub fn gauss_log_prob(&mut self, x: TensorId, mean: TensorId, log_scale: TensorId) -> TensorId {
        let d = self.shape_of(x).len();
        debug_assert_eq!(self.shape_of(mean).len(), d);
        debug_assert_eq!(self.shape_of(log_scale).len(), d);
        let (id, off) = self.push(Shape::scalar(), Op::GaussLogProb { x, mean, log_scale });
        let (xo, mo, lo) = (self.offset(x), self.offset(mean), self.offset(log_scale));
        let mut acc = -0.5 * crate::nn::layers::LN_2PI * d as f64;
        for i in 0..d {
            let ls = self.data[lo + i];
            let z = (self.data[xo + i] - self.data[mo + i]) * (-ls).exp();
            acc -= ls + 0.5 * z * z;
        }
        self.data[off] = acc;
        id
    }

    // ---- backward pass ----

    /// Reverse-mode sweep seeding `d root / d root = 1`.
    ///
    /// Fails unless `root` is a scalar. After it returns, every node holds
    /// `d root / d node` in its gradient accumulator.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.shape_of(root).is_scalar() {
            return Err(Error::usage("backward requires a scalar root"));
        }
        for g in self.grad.iter_mut() {
            *g = 0.0;
        }
        let root_off = self.offset(root);
        self.grad[root_off] = 1.0;

        for i in (0..=root.0 as usize).rev() {
            let (shape, offset) = {
                let n = &self.nodes[i];
                (n.shape, n.offset)
            };
            let len = shape.len();
            // Nodes outside the root's ancestry carry no gradient; skip them.
            if self.grad[offset..offset + len].iter().all(|&g| g == 0.0) {
                continue;
            }
            self.scratch.clear();
            self.scratch
                .extend_from_slice(&self.grad[offset..offset + len]);
            // Take the op out instead of cloning; variants with payloads
            // would otherwise allocate on every visit.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.apply_backward(&op, shape, offset);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn apply_backward(&mut self, op: &Op, shape: Shape, out_off: usize) {
        let len = shape.len();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (ao, bo) = (self.offset(*a), self.offset(*b));
                for i in 0..len {
                    self.grad[ao + i] += self.scratch[i];
                }
                for i in 0..len {
                    self.grad[bo + i] += self.scratch[i];
                }
            }
            Op::Sub(a, b) => {
                let (ao, bo) = (self.offset(*a), self.offset(*b));
                for i in 0..len {
                    self.grad[ao + i] += self.scratch[i];
                }
                for i in 0..len {
                    self.grad[bo + i] -= self.scratch[i];
                }
            }
            Op::Mul(a, b) => {
                let (ao, bo) = (self.offset(*a), self.offset(*b));
                for i in 0..len {
                    self.grad[ao + i] += self.scratch[i] * self.data[bo + i];
                }
                for i in 0..len {
                    self.grad[bo + i] += self.scratch[i] * self.data[ao + i];
                }
            }
            Op::Neg(a) => {
                let ao = self.offset(*a);
                for i in 0..len {
                    self.grad[ao + i] -= self.scratch[i];
                }
            }
            Op::Scale(a, c) => {
                let ao = self.offset(*a);
                for i in 0..len {
                    self.grad[ao + i] += c * self.scratch[i];
                }
            }
            Op::AddScalar(a) => {
                let ao = self.offset(*a);
                for i in 0..len {
                    self.grad[ao + i] += self.scratch[i];
                }
            }
            Op::MatVec(w, x) => {
                let (sw, _) = (self.shape_of(*w), self.shape_of(*x));
                let (m, n) = (sw.rows, sw.cols);
                let (wo, xo) = (self.offset(*w), self.offset(*x));
                for i in 0..m {
                    let gi = self.scratch[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = wo + i * n;
                    for j in 0..n {
                        self.grad[row + j] += gi * self.data[xo + j];
                    }
                }
                for i in 0..m {
                    let gi = self.scratch[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = wo + i * n;
                    for j in 0..n {
                        self.grad[xo + j] += gi * self.data[row + j];
                    }
                }
            }
            Op::Tanh(a) => {
                let ao = self.offset(*a);
                for i in 0..len {
                    let y = self.data[out_off + i];
                    self.grad[ao + i] += self.scratch[i] * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ao = self.offset(*a);
                for i in 0..len {
                    let y = self.data[out_off + i];
                    self.grad[ao + i] += self.scratch[i] * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let ao = self.offset(*a);
                for i in 0..len {
                    if self.data[ao + i] > 0.0 {
                        self.grad[ao + i] += self.scratch[i];
                    }
                }
            }
            Op::Exp(a) => {
                let ao = self.offset(*a);
                for i in 0..len {
                    self.grad[ao + i] += self.scratch[i] * self.data[out_off + i];
                }
            }
            Op::Sum(a) => {
                let ao = self.offset(*a);
                let n = self.nodes[a.0 as usize].shape.len();
                let g = self.scratch[0];
                for i in 0..n {
                    self.grad[ao + i] += g;
                }
            }
            Op::Dot(a, b) => {
                let (ao, bo) = (self.offset(*a), self.offset(*b));
                let n = self.nodes[a.0 as usize].shape.len();
                let g = self.scratch[0];
                for i in 0..n {
                    self.grad[ao + i] += g * self.data[bo + i];
                }
                for i in 0..n {
                    self.grad[bo + i] += g * self.data[ao + i];
                }
            }
            Op::Concat(parts) => {
                let mut cursor = 0;
                for &p in parts {
                    let po = self.offset(p);
                    let n = self.nodes[p.0 as usize].shape.len();
                    for i in 0..n {
                        self.grad[po + i] += self.scratch[cursor + i];
                    }
                    cursor += n;
                }
            }
            Op::AddN(terms) => {
                let g = self.scratch[0];
                for &t in terms {
                    let to = self.offset(t);
                    self.grad[to] += g;
                }
            }
            Op::WeightedSum(a, weights) => {
                let ao = self.offset(*a);
                let g = self.scratch[0];
                for (i, w) in weights.iter().enumerate() {
                    self.grad[ao + i] += g * w;
                }
            }
            Op::Reshape(a) => {
                let ao = self.offset(*a);
                for i in 0..len {
                    self.grad[ao + i] += self.scratch[i];
                }
            }
            Op::LogSumExp(a) => {
                let ao = self.offset(*a);
                let n = self.nodes[a.0 as usize].shape.len();
                let g = self.scratch[0];
                let z = self.data[out_off];
                for i in 0..n {
                    self.grad[ao + i] += g * (self.data[ao + i] - z).exp();
                }
            }
            Op::LogSoftmax(a) => {
                let ao = self.offset(*a);
                for r in 0..shape.rows {
                    let base = r * shape.cols;
                    let mut gsum = 0.0;
                    for c in 0..shape.cols {
                        gsum += self.scratch[base + c];
                    }
                    for c in 0..shape.cols {
                        let p = self.data[out_off + base + c].exp();
                        self.grad[ao + base + c] += self.scratch[base + c] - gsum * p;
                    }
                }
            }
            Op::LseMatVec { trans, prev } => {
                let k = shape.cols;
                let (to, po) = (self.offset(*trans), self.offset(*prev));
                for col in 0..k {
                    let g = self.scratch[col];
                    if g == 0.0 {
                        continue;
                    }
                    let out = self.data[out_off + col];
                    for j in 0..k {
                        let w = (self.data[po + j] + self.data[to + j * k + col] - out).exp();
                        self.grad[po + j] += g * w;
                        self.grad[to + j * k + col] += g * w;
                    }
                }
            }
            Op::LseMatVecT { trans, next } => {
                let k = shape.cols;
                let (to, no) = (self.offset(*trans), self.offset(*next));
                for rowi in 0..k {
                    let g = self.scratch[rowi];
                    if g == 0.0 {
                        continue;
                    }
                    let out = self.data[out_off + rowi];
                    for col in 0..k {
                        let w = (self.data[to + rowi * k + col] + self.data[no + col] - out).exp();
                        self.grad[no + col] += g * w;
                        self.grad[to + rowi * k + col] += g * w;
                    }
                }
            }
            Op::Affine { w, x, b } => {
                let sw = self.shape_of(*w);
                let (m, n) = (sw.rows, sw.cols);
                let (wo, xo, bo) = (self.offset(*w), self.offset(*x), self.offset(*b));
                let data = &self.data;
                let grad = &mut self.grad;
                let input = &data[xo..xo + n];
                for i in 0..m {
                    let gi = self.scratch[i];
                    if gi == 0.0 {
                        continue;
                    }
                    grad[bo + i] += gi;
                    axpy(&mut grad[wo + i * n..wo + (i + 1) * n], gi, input);
                    axpy(&mut grad[xo..xo + n], gi, &data[wo + i * n..wo + (i + 1) * n]);
                }
            }
            Op::Gru(fused) => {
                self.gru_backward(&fused.ids, fused.cache_off, shape.cols);
            }
            Op::GaussLogProb { x, mean, log_scale } => {
                let g = self.scratch[0];
                let d = self.nodes[x.0 as usize].shape.len();
                let (xo, mo, lo) = (self.offset(*x), self.offset(*mean), self.offset(*log_scale));
                for i in 0..d {
                    let inv = (-self.data[lo + i]).exp();
                    let z = (self.data[xo + i] - self.data[mo + i]) * inv;
                    self.grad[xo + i] -= g * z * inv;
                    self.grad[mo + i] += g * z * inv;
                    self.grad[lo + i] += g * (z * z - 1.0);
                }
            }
        }
    }

    /// Backpropagation through one fused GRU step, using the gate
    /// activations saved during the forward pass.
    fn gru_backward(&mut self, ids: &GruIds, cache_off: usize, h: usize) {
        let e = self.shape_of(ids.input).cols;
        let update = &self.cache[cache_off..cache_off + h];
        let reset = &self.cache[cache_off + h..cache_off + 2 * h];
        let cand = &self.cache[cache_off + 2 * h..cache_off + 3 * h];

        let offs = self.gru_offsets(ids);
        let [wu, wr, wc, uu, ur, uc, bu, br, bc, so, io] = offs;
        let mut d_cand = std::mem::take(&mut self.buf_d1);
        let mut d_update = std::mem::take(&mut self.buf_d2);
        let mut d_rh = std::mem::take(&mut self.buf_d3);
        d_cand.clear();
        d_update.clear();
        d_rh.clear();
        d_cand.resize(h, 0.0);
        d_update.resize(h, 0.0);
        d_rh.resize(h, 0.0);

        let data = &self.data;
        let grad = &mut self.grad;
        let state = &data[so..so + h];
        let input = &data[io..io + e];

        for i in 0..h {
            let go = self.scratch[i];
            let (u, c) = (update[i], cand[i]);
            // Through the convex combination.
            d_cand[i] = go * u * (1.0 - c * c);
            d_update[i] = go * (c - state[i]) * u * (1.0 - u);
            grad[so + i] += go * (1.0 - u);
        }

        // Candidate affine: a_c = Wc x + Uc (r .* h) + bc.
        for i in 0..h {
            let d = d_cand[i];
            if d == 0.0 {
                continue;
            }
            grad[bc + i] += d;
            axpy(&mut grad[wc + i * e..wc + (i + 1) * e], d, input);
            axpy(&mut grad[io..io + e], d, &data[wc + i * e..wc + (i + 1) * e]);
            let urow = &data[uc + i * h..uc + (i + 1) * h];
            let grow = &mut grad[uc + i * h..uc + (i + 1) * h];
            for j in 0..h {
                grow[j] += d * (reset[j] * state[j]);
                d_rh[j] += d * urow[j];
            }
        }
        // Split d(r .* h) into the reset gate and the state.
        for j in 0..h {
            let r = reset[j];
            let d_r = d_rh[j] * state[j] * r * (1.0 - r);
            grad[so + j] += d_rh[j] * r;
            // Reset affine: a_r = Wr x + Ur h + br.
            if d_r != 0.0 {
                grad[br + j] += d_r;
                axpy(&mut grad[wr + j * e..wr + (j + 1) * e], d_r, input);
                axpy(&mut grad[io..io + e], d_r, &data[wr + j * e..wr + (j + 1) * e]);
                axpy(&mut grad[ur + j * h..ur + (j + 1) * h], d_r, state);
                axpy(&mut grad[so..so + h], d_r, &data[ur + j * h..ur + (j + 1) * h]);
            }
        }
        // Update affine: a_u = Wu x + Uu h + bu.
        for i in 0..h {
            let d = d_update[i];
            if d == 0.0 {
                continue;
            }
            grad[bu + i] += d;
            axpy(&mut grad[wu + i * e..wu + (i + 1) * e], d, input);
            axpy(&mut grad[io..io + e], d, &data[wu + i * e..wu + (i + 1) * e]);
            axpy(&mut grad[uu + i * h..uu + (i + 1) * h], d, state);
            axpy(&mut grad[so..so + h], d, &data[uu + i * h..uu + (i + 1) * h]);
        }

        self.buf_d1 = d_cand;
        self.buf_d2 = d_update;
        self.buf_d3 = d_rh;
    }

    fn gru_offsets(&self, ids: &GruIds) -> [usize; 11] {
        [
            self.offset(ids.w_update),
            self.offset(ids.w_reset),
            self.offset(ids.w_cand),
            self.offset(ids.u_update),
            self.offset(ids.u_reset),
            self.offset(ids.u_cand),
            self.offset(ids.b_update),
            self.offset(ids.b_reset),
            self.offset(ids.b_cand),
            self.offset(ids.state),
            self.offset(ids.input),
        ]
    }

    /// Gradients of the most recent backward pass, summed per bound parameter.
    ///
    /// Parameters bound multiple times in one graph accumulate correctly.
    pub fn param_gradients(&self, store: &ParamStore) -> GradientMap {
        let mut map = GradientMap::zeros(store);
        self.accumulate_param_gradients(&mut map);
        map
    }

    /// Add this graph's parameter gradients into an existing map.
    pub fn accumulate_param_gradients(&self, map: &mut GradientMap) {
        for &(pid, node) in &self.bindings {
            let g = self.grad_of(node);
            let dst = &mut map.grads[pid.index()];
            for (d, s) in dst.iter_mut().zip(g) {
                *d += *s;
            }
        }
    }
}

/// Dense per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradientMap {
    grads: Vec<Vec<f64>>,
}

impl GradientMap {
    pub fn zeros(store: &ParamStore) -> Self {
        GradientMap {
            grads: store.iter().map(|e| vec![0.0; e.values.len()]).collect(),
        }
    }

    pub fn get(&self, pid: ParamId) -> &[f64] {
        &self.grads[pid.index()]
    }

    pub fn get_mut(&mut self, pid: ParamId) -> &mut [f64] {
        &mut self.grads[pid.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn add(&mut self, other: &GradientMap) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in &self.grads {
            for v in g {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn has_non_finite(&self) -> bool {
        self.grads.iter().any(|g| g.iter().any(|v| !v.is_finite()))
    }
}

/// Gate activations of one GRU step, written into the supplied buffers.
/// `offs` is the offset array produced by `Graph::gru_offsets`.
#[inline(always)]
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators break the floating-point dependency chain.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    tail + (acc[0] + acc[1]) + (acc[2] + acc[3])
}

#[inline(always)]
fn axpy(dst: &mut [f64], c: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn compute_gru_gates(
    data: &[f64],
    offs: &[usize; 11],
    h: usize,
    e: usize,
    update: &mut Vec<f64>,
    reset: &mut Vec<f64>,
    cand: &mut Vec<f64>,
) {
    let [wu, wr, wc, uu, ur, uc, bu, br, bc, so, io] = *offs;
    update.clear();
    reset.clear();
    cand.clear();
    update.resize(h, 0.0);
    reset.resize(h, 0.0);
    cand.resize(h, 0.0);
    let input = &data[io..io + e];
    let state = &data[so..so + h];
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    for i in 0..h {
        let au = data[bu + i]
            + dot_slices(&data[wu + i * e..wu + (i + 1) * e], input)
            + dot_slices(&data[uu + i * h..uu + (i + 1) * h], state);
        let ar = data[br + i]
            + dot_slices(&data[wr + i * e..wr + (i + 1) * e], input)
            + dot_slices(&data[ur + i * h..ur + (i + 1) * h], state);
        update[i] = sigmoid(au);
        reset[i] = sigmoid(ar);
    }
    for i in 0..h {
        let mut ac = data[bc + i] + dot_slices(&data[wc + i * e..wc + (i + 1) * e], input);
        let urow = &data[uc + i * h..uc + (i + 1) * h];
        for j in 0..h {
            ac += urow[j] * (reset[j] * state[j]);
        }
        cand[i] = ac.tanh();
    }
}

/// Stable log-sum-exp of a slice.
pub fn lse_slice(xs: &[f64]) -> f64 {
    let mut maxv = f64::NEG_INFINITY;
    for &x in xs {
        if x > maxv {
            maxv = x;
        }
    }
    if maxv == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    for &x in xs {
        acc += (x - maxv).exp();
    }
    maxv + acc.ln()
}
