//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once from the loss towards the
//! leaves.

use std::collections::{BTreeMap, HashMap};

use super::params::ParameterStore;
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm in the classification loss.
pub const PROB_EPS: f64 = 1e-12;

/// Sparse row: `(column, value)` pairs sorted by column.
pub type SparseRow = Vec<(usize, f64)>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Affine { x: Var, w: Var, b: Var },
    SparseAffine { rows: Vec<SparseRow>, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    EmbeddingBag { table: Var, bags: Vec<Vec<usize>> },
    Gather { table: Var, idx: Vec<usize> },
    KlStdNormal { mu: Var, log_sigma: Var },
    BinaryCrossEntropy { p: Var, targets: Vec<usize>, weights: Vec<f64> },
    SparseNll { logp: Var, rows: Vec<SparseRow> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient w.r.t. any node; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.per_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(format!(
        "{op}: incompatible shapes {:?} and {:?}",
        a.shape(),
        b.shape()
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A trainable leaf backed by `store[name]`. Repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// A leaf holding `store[name]` that receives no gradient (frozen weights).
    pub fn frozen(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        Ok(self.constant(store.get(name)?.clone()))
    }

    /// `x·Wᵀ + b`; `x` is `[in]` or `[n, in]`, `W` is `[out, in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tensor::affine_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::Affine { x, w, b }, rg))
    }

    /// Affine map applied to sparse input rows (no gradient w.r.t. the input).
    pub fn sparse_affine(&mut self, rows: Vec<SparseRow>, w: Var, b: Var) -> Result<Var> {
        let (wt, bt) = (self.value(w), self.value(b));
        if !wt.is_matrix() || bt.len() != wt.shape()[0] {
            return Err(shape_err("sparse_affine", wt, bt));
        }
        let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
        let mut y = Vec::with_capacity(rows.len() * out_dim);
        for row in &rows {
            let start = y.len();
            y.extend_from_slice(bt.data());
            let yi = &mut y[start..];
            for &(j, c) in row {
                if j >= in_dim {
                    return Err(Error::dim(format!(
                        "sparse_affine: column {j} out of range for input dim {in_dim}"
                    )));
                }
                for (o, yo) in yi.iter_mut().enumerate() {
                    *yo += c * wt.data()[o * in_dim + j];
                }
            }
        }
        let y = Tensor::new(vec![rows.len(), out_dim], y)?;
        let rg = self.rg(w) || self.rg(b);
        Ok(self.push(y, Op::SparseAffine { rows, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).is_matrix() {
            return Err(Error::dim("transpose expects a matrix"));
        }
        let y = tensor::transpose(self.value(a));
        let rg = self.rg(a);
        Ok(self.push(y, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let mut y = ta.clone();
        y.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let y = self.value(a).scale(k);
        let rg = self.rg(a);
        self.push(y, Op::Scale(a, k), rg)
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(y, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(y, Op::Exp(a), rg)
    }

    /// Softmax over a vector, or over each row of a matrix.
    pub fn softmax(&mut self, a: Var) -> Var {
        let y = tensor::softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(y, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let y = tensor::log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(y, Op::LogSoftmaxRows(a), rg)
    }

    /// Concatenation along the last axis: two vectors, or two matrices with
    /// equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let both_vec = ta.is_vector() && tb.is_vector();
        let both_mat = ta.is_matrix() && tb.is_matrix() && ta.rows() == tb.rows();
        if !(both_vec || both_mat) {
            return Err(shape_err("concat", ta, tb));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        let shape = if both_vec {
            vec![ca + cb]
        } else {
            vec![rows, ca + cb]
        };
        let y = Tensor::new(shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::ConcatCols(a, b), rg))
    }

    /// Stacks equal-length vectors into a `[n, d]` matrix.
    pub fn stack_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let d = vs.first().map_or(0, |&v| self.value(v).len());
        let mut data = Vec::with_capacity(vs.len() * d);
        for &v in vs {
            let t = self.value(v);
            if !t.is_vector() || t.len() != d {
                return Err(Error::dim(format!(
                    "stack_rows: expected vectors of length {d}, got {:?}",
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let y = Tensor::new(vec![vs.len(), d], data)?;
        let rg = vs.iter().any(|&v| self.rg(v));
        Ok(self.push(y, Op::StackRows(vs.to_vec()), rg))
    }

    /// Mean over the rows of `[n, d]`, giving `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() || t.rows() == 0 {
            return Err(Error::dim(format!("mean_rows: {:?}", t.shape())));
        }
        let (n, d) = (t.rows(), t.cols());
        let mut y = vec![0.0; d];
        for i in 0..n {
            for (acc, v) in y.iter_mut().zip(t.row(i)) {
                *acc += v;
            }
        }
        y.iter_mut().for_each(|v| *v /= n as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(y), Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(y, Op::Sum(a), rg)
    }

    /// Mean of table rows per bag: `[n_bags, d]`.
    pub fn embedding_bag(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() {
            return Err(Error::dim("embedding_bag expects a [V, d] table"));
        }
        let (v, d) = (t.rows(), t.cols());
        let mut y = vec![0.0; bags.len() * d];
        for (bi, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::InvalidInput("embedding_bag: empty bag".into()));
            }
            let out = &mut y[bi * d..(bi + 1) * d];
            // Summing in index order makes the mean exactly order-invariant.
            let mut sorted = bag.clone();
            sorted.sort_unstable();
            for &ix in &sorted {
                if ix >= v {
                    return Err(Error::dim(format!("embedding index {ix} >= {v}")));
                }
                for (o, e) in out.iter_mut().zip(t.row(ix)) {
                    *o += e;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let y = Tensor::new(vec![bags.len(), d], y)?;
        let rg = self.rg(table);
        Ok(self.push(y, Op::EmbeddingBag { table, bags }, rg))
    }

    /// Selects table rows in order: `[idx.len(), d]`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() {
            return Err(Error::dim("gather expects a [V, d] table"));
        }
        let mut y = Vec::with_capacity(idx.len() * t.cols());
        for &ix in &idx {
            if ix >= t.rows() {
                return Err(Error::dim(format!("gather index {ix} >= {}", t.rows())));
            }
            y.extend_from_slice(t.row(ix));
        }
        let y = Tensor::new(vec![idx.len(), t.cols()], y)?;
        let rg = self.rg(table);
        Ok(self.push(y, Op::Gather { table, idx }, rg))
    }

    /// Reparameterized draw `mu + exp(log_sigma) ⊙ noise` with caller-supplied noise.
    pub fn gaussian_sample(&mut self, mu: Var, log_sigma: Var, noise: &Tensor) -> Result<Var> {
        let (m, s) = (self.value(mu), self.value(log_sigma));
        if m.shape() != s.shape() || m.shape() != noise.shape() {
            return Err(Error::dim(format!(
                "gaussian_sample: mu {:?}, log_sigma {:?}, noise {:?}",
                m.shape(),
                s.shape(),
                noise.shape()
            )));
        }
        let sigma = self.exp(log_sigma);
        let eps = self.constant(noise.clone());
        let spread = self.mul(sigma, eps)?;
        self.add(mu, spread)
    }

    /// `KL(N(mu, diag σ²) ‖ N(0, I))` summed over every entry.
    pub fn kl_standard_normal(&mut self, mu: Var, log_sigma: Var) -> Result<Var> {
        let (m, s) = (self.value(mu), self.value(log_sigma));
        if m.shape() != s.shape() {
            return Err(shape_err("kl_standard_normal", m, s));
        }
        let y = kl_standard_normal(m, s)?;
        let rg = self.rg(mu) || self.rg(log_sigma);
        Ok(self.push(Tensor::scalar(y), Op::KlStdNormal { mu, log_sigma }, rg))
    }

    /// Weighted sum of per-class binary cross-entropies against one-hot targets.
    pub fn binary_cross_entropy(
        &mut self,
        p: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let y = bce_forward(self.value(p), &targets, &weights)?;
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(y),
            Op::BinaryCrossEntropy {
                p,
                targets,
                weights,
            },
            rg,
        ))
    }

    /// `-Σ_rows Σ_(j,c) c · logp[row, j]`.
    pub fn sparse_nll(&mut self, logp: Var, rows: Vec<SparseRow>) -> Result<Var> {
        let t = self.value(logp);
        if t.rows() != rows.len() {
            return Err(Error::dim(format!(
                "sparse_nll: {} rows of log-probabilities, {} count rows",
                t.rows(),
                rows.len()
            )));
        }
        let c = t.cols();
        let mut y = 0.0;
        for (i, row) in rows.iter().enumerate() {
            for &(j, cnt) in row {
                if j >= c {
                    return Err(Error::dim(format!("sparse_nll: column {j} >= {c}")));
                }
                y -= cnt * t.data()[i * c + j];
            }
        }
        let rg = self.rg(logp);
        Ok(self.push(Tensor::scalar(y), Op::SparseNll { logp, rows }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads[i]) {
                by_name.insert(name.clone(), g.clone());
            }
        }
        Ok(Gradients {
            per_node: grads,
            by_name,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
                let n = xt.rows();
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * in_dim];
                    for i in 0..n {
                        let dxi = &mut dx[i * in_dim..(i + 1) * in_dim];
                        for o in 0..out_dim {
                            let go = g.data()[i * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wo = &wt.data()[o * in_dim..(o + 1) * in_dim];
                            for (d, wv) in dxi.iter_mut().zip(wo) {
                                *d += go * wv;
                            }
                        }
                    }
                    let dx = Tensor::new(xt.shape().to_vec(), dx).expect("shape");
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    for i in 0..n {
                        let xi = xt.row(i);
                        for o in 0..out_dim {
                            let go = g.data()[i * out_dim + o];
                            if go == 0.0 {
                                continue;
                            }
                            let dwo = &mut dw[o * in_dim..(o + 1) * in_dim];
                            for (d, xv) in dwo.iter_mut().zip(xi) {
                                *d += go * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(wt.shape().to_vec(), dw).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; out_dim];
                    for i in 0..n {
                        for (d, gv) in db.iter_mut().zip(&g.data()[i * out_dim..(i + 1) * out_dim]) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::SparseAffine { rows, w, b } => {
                let wt = self.value(*w);
                let (out_dim, in_dim) = (wt.shape()[0], wt.shape()[1]);
                if self.rg(*w) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    for (i, row) in rows.iter().enumerate() {
                        let gi = &g.data()[i * out_dim..(i + 1) * out_dim];
                        for &(j, c) in row {
                            for (o, gv) in gi.iter().enumerate() {
                                dw[o * in_dim + j] += gv * c;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(wt.shape().to_vec(), dw).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; out_dim];
                    for i in 0..rows.len() {
                        for (d, gv) in db.iter_mut().zip(&g.data()[i * out_dim..(i + 1) * out_dim]) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::MatMul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let da = tensor::matmul(g, &tensor::transpose(bt)).unwrap();
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = tensor::matmul(&tensor::transpose(at), g).unwrap();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, tensor::transpose(g));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(at.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::Exp(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, yv)| gv * yv)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − <g, y>) per row
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let inner = tensor::dot(gr, yr);
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g − softmax(x) · Σg per row
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let gs: f64 = gr.iter().sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = gv - yv.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ca, cb) = (ta.cols(), tb.cols());
                let rows = ta.rows();
                let mut da = Vec::with_capacity(ta.len());
                let mut db = Vec::with_capacity(tb.len());
                for i in 0..rows {
                    let gi = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da.extend_from_slice(&gi[..ca]);
                    db.extend_from_slice(&gi[ca..]);
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::StackRows(vs) => {
                for (i, &v) in vs.iter().enumerate() {
                    self.accumulate(grads, v, Tensor::vector(g.row(i).to_vec()));
                }
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let n = t.rows();
                let inv = 1.0 / n as f64;
                let mut d = Vec::with_capacity(t.len());
                for _ in 0..n {
                    d.extend(g.data().iter().map(|v| v * inv));
                }
                self.accumulate(grads, *a, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape(), g.item()));
            }
            Op::EmbeddingBag { table, bags } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                for (bi, bag) in bags.iter().enumerate() {
                    let inv = 1.0 / bag.len() as f64;
                    let gb = &g.data()[bi * d..(bi + 1) * d];
                    for &ix in bag {
                        let row = &mut dt.data_mut()[ix * d..(ix + 1) * d];
                        for (r, gv) in row.iter_mut().zip(gb) {
                            *r += gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Gather { table, idx } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = Tensor::zeros(t.shape());
                for (k, &ix) in idx.iter().enumerate() {
                    let row = &mut dt.data_mut()[ix * d..(ix + 1) * d];
                    for (r, gv) in row.iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                        *r += gv;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::KlStdNormal { mu, log_sigma } => {
                let gv = g.item();
                let (m, s) = (self.value(*mu), self.value(*log_sigma));
                self.accumulate(grads, *mu, m.scale(gv));
                self.accumulate(grads, *log_sigma, s.map(|ls| gv * ((2.0 * ls).exp() - 1.0)));
            }
            Op::BinaryCrossEntropy {
                p,
                targets,
                weights,
            } => {
                let gv = g.item();
                let pt = self.value(*p);
                let c = pt.cols();
                let mut d = vec![0.0; pt.len()];
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for l in 0..c {
                        let pv = pt.data()[i * c + l];
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pv) {
                            continue;
                        }
                        let y = if l == t { 1.0 } else { 0.0 };
                        d[i * c + l] = -gv * w * (y / pv - (1.0 - y) / (1.0 - pv));
                    }
                }
                self.accumulate(grads, *p, Tensor::new(pt.shape().to_vec(), d).unwrap());
            }
            Op::SparseNll { logp, rows } => {
                let gv = g.item();
                let t = self.value(*logp);
                let c = t.cols();
                let mut d = Tensor::zeros(t.shape());
                for (i, row) in rows.iter().enumerate() {
                    for &(j, cnt) in row {
                        d.data_mut()[i * c + j] -= gv * cnt;
                    }
                }
                self.accumulate(grads, *logp, d);
            }
        }
    }
}

/// Closed-form `KL(N(mu, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − 2 log σ)`.
pub fn kl_standard_normal(mu: &Tensor, log_sigma: &Tensor) -> Result<f64> {
    if mu.shape() != log_sigma.shape() {
        return Err(shape_err("kl_standard_normal", mu, log_sigma));
    }
    Ok(0.5
        * mu
            .data()
            .iter()
            .zip(log_sigma.data())
            .map(|(m, s)| m * m + (2.0 * s).exp() - 1.0 - 2.0 * s)
            .sum::<f64>())
}

fn bce_forward(p: &Tensor, targets: &[usize], weights: &[f64]) -> Result<f64> {
    let rows = p.rows();
    if targets.len() != rows || weights.len() != rows {
        return Err(Error::dim(format!(
            "binary_cross_entropy: {} prediction rows, {} targets, {} weights",
            rows,
            targets.len(),
            weights.len()
        )));
    }
    let c = p.cols();
    let mut loss = 0.0;
    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        if t >= c {
            return Err(Error::InvalidInput(format!(
                "target class {t} out of range for {c} classes"
            )));
        }
        let mut row = 0.0;
        for l in 0..c {
            let pv = p.data()[i * c + l].clamp(PROB_EPS, 1.0 - PROB_EPS);
            row += if l == t { pv.ln() } else { (1.0 - pv).ln() };
        }
        loss -= w * row;
    }
    Ok(loss)
}

/// Per-class binary cross-entropy of one prediction against a class index:
/// `−Σ_l [y_l log p_l + (1 − y_l) log(1 − p_l)]`, probabilities clamped to
/// `[1e-12, 1 − 1e-12]`. Under a one-hot target its minimizer coincides with
/// the categorical log-loss.
pub fn cross_entropy(pred: &Tensor, target: usize) -> Result<f64> {
    bce_forward(pred, &[target], &[1.0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::new();
        let s = store(&[("x", Tensor::vector(vec![-1.0, 0.0, 2.0]))]);
        let x = tape.param(&s, "x").unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_vectors_and_empty() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let e = tape.constant(Tensor::vector(vec![]));
        let c2 = tape.concat(e, b).unwrap();
        assert_eq!(tape.value(c2), tape.value(b));
        let m = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.concat(a, m).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = Tensor::vector(vec![0.0, 1.0, 0.0]);
        assert!(cross_entropy(&onehot, 1).unwrap().abs() < 1e-10);
        let uniform = Tensor::vector(vec![0.5, 0.5]);
        let v = cross_entropy(&uniform, 0).unwrap();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(cross_entropy(&uniform, 2).is_err());
        let better = cross_entropy(&Tensor::vector(vec![0.7, 0.3]), 0).unwrap();
        let worse = cross_entropy(&Tensor::vector(vec![0.6, 0.4]), 0).unwrap();
        assert!(worse > better);
    }

    #[test]
    fn gaussian_sample_identities() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::vector(vec![0.5, -1.0]));
        let ls = tape.constant(Tensor::vector(vec![0.3, 0.0]));
        let z = tape
            .gaussian_sample(mu, ls, &Tensor::zeros(&[2]))
            .unwrap();
        assert_eq!(tape.value(z).data(), &[0.5, -1.0]);
        let ls0 = tape.constant(Tensor::zeros(&[2]));
        let z = tape
            .gaussian_sample(mu, ls0, &Tensor::vector(vec![1.5, 2.0]))
            .unwrap();
        assert_eq!(tape.value(z).data(), &[2.0, 1.0]);
        assert!(tape.gaussian_sample(mu, ls, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn kl_examples() {
        let z = Tensor::zeros(&[3]);
        assert_eq!(kl_standard_normal(&z, &z).unwrap(), 0.0);
        let v = kl_standard_normal(&Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0])).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn repeated_param_reuses_node() {
        let s = store(&[("w", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let a = tape.param(&s, "w").unwrap();
        let b = tape.param(&s, "w").unwrap();
        assert_eq!(a, b);
        let m = tape.mul(a, b).unwrap();
        let l = tape.sum(m);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let s = store(&[("w", Tensor::vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let w = tape.frozen(&s, "w").unwrap();
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap();
        assert!(g.param("w").is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(a).is_err());
    }
}
