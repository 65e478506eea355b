//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values the backward rule needs. Parameters enter the tape through
//! [`Tape::param`]; [`Tape::backward`] returns gradients for every node and
//! accumulates parameter gradients into a [`Grads`] buffer.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect())
    }
}

/// Gradient buffers mirroring a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Array2<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn sq_norm(&self) -> f64 {
        self.0.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Attention visibility: `mask[[i, j]]` is true when row `i` may read `j`.
pub type Mask = Arc<Array2<bool>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a `1 x n` row to every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    RowNormalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    MaskedSoftmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    StraightThrough(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// A constant input; gradients are still reported for it.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Brings a parameter onto the tape (once per tape).
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(params.get(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    /// Straight-through quantization: the value is `code + (x - base)`, which
    /// is exactly `code` when `x` equals `base`; the gradient passes to `x`
    /// unchanged.
    pub fn straight_through(&mut self, x: NodeId, code: &Array2<f64>, base: &Array2<f64>) -> NodeId {
        let v = code + &(self.value(x) - base);
        self.push(v, Op::StraightThrough(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.dot(&row) / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row *= inv;
            inv_std.push(inv);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row /= n;
            norms.push(n);
        }
        self.push(v, Op::RowNormalize { x, norms })
    }

    /// Row-wise softmax over the entries the mask allows; the rest are zero.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Mask) -> NodeId {
        let xv = self.value(x);
        debug_assert_eq!(xv.dim(), mask.dim());
        let mut v = Array2::zeros(xv.raw_dim());
        for ((xr, mut vr), mr) in xv.rows().into_iter().zip(v.rows_mut()).zip(mask.rows()) {
            let max = xr
                .iter()
                .zip(mr.iter())
                .filter(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, |a, (&b, _)| a.max(b));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for ((o, &xi), &m) in vr.iter_mut().zip(xr.iter()).zip(mr.iter()) {
                if m {
                    *o = (xi - max).exp();
                    z += *o;
                }
            }
            vr /= z;
        }
        self.push(v, Op::MaskedSoftmax(x))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Propagates the seeded output gradients back through the tape.
    ///
    /// Parameter gradients are added into `grads`. The returned vector holds
    /// the gradient of every leaf node; interior slots are `None`.
    pub fn backward(&self, seeds: &[(NodeId, Array2<f64>)], grads: &mut Grads) -> Vec<Option<Array2<f64>>> {
        let mut g: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            debug_assert_eq!(seed.dim(), self.value(*id).dim(), "seed shape for node {id}");
            accumulate(&mut g[*id], seed.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    g[i] = Some(gi);
                    continue;
                }
                Op::Param(pid) => *grads.get_mut(*pid) += &gi,
                Op::MatMul(a, b) => {
                    let da = gi.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&gi);
                    accumulate(&mut g[*a], da);
                    accumulate(&mut g[*b], db);
                }
                Op::MatMulT(a, b) => {
                    let da = gi.dot(self.value(*b));
                    let db = gi.t().dot(self.value(*a));
                    accumulate(&mut g[*a], da);
                    accumulate(&mut g[*b], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g[*b], gi.clone());
                    accumulate(&mut g[*a], gi);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut g[*row], gi.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut g[*a], gi);
                }
                Op::Scale(a, s) => accumulate(&mut g[*a], gi * *s),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut d = gi;
                    d.zip_mut_with(x, |d, &x| {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let t = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
                    });
                    accumulate(&mut g[*a], d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    accumulate(&mut g[*beta], gi.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut g[*gamma], (&gi * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &gi * gam;
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.dot(&h);
                        let inv = inv_std[r];
                        for k in 0..out.len() {
                            out[k] = inv / n * (n * dh[k] - sum_dh - h[k] * sum_dh_h);
                        }
                    }
                    accumulate(&mut g[*x], dx);
                }
                Op::RowNormalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = gi;
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let proj = yr.dot(&row);
                        row.zip_mut_with(&yr, |d, &yk| *d = (*d - yk * proj) / norms[r]);
                    }
                    accumulate(&mut g[*x], dx);
                }
                Op::MaskedSoftmax(x) => {
                    let p = &node.value;
                    let mut dx = gi;
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let pr = p.row(r);
                        let dot = pr.dot(&row);
                        row.zip_mut_with(&pr, |d, &pk| *d = pk * (*d - dot));
                    }
                    accumulate(&mut g[*x], dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![.., *start..*start + gi.ncols()]).assign(&gi);
                    accumulate(&mut g[*x], dx);
                }
                Op::SliceRows { x, start } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![*start..*start + gi.nrows(), ..]).assign(&gi);
                    accumulate(&mut g[*x], dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut g[p], gi.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        accumulate(&mut g[p], gi.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::StraightThrough(x) => accumulate(&mut g[*x], gi),
            }
        }
        g
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn straight_through_is_exact() {
        let z = array![[0.1, 0.7, -0.3]];
        let q = array![[0.3, 0.9, 0.1 + 0.2]];
        let mut t = Tape::new();
        let x = t.leaf(z.clone());
        let y = t.straight_through(x, &q, &z);
        assert_eq!(t.value(y), &q);
        let probe = array![[1.5, -2.0, 0.25]];
        let g = t.backward(&[(y, probe.clone())], &mut ParamSet::new().zero_grads());
        assert_eq!(g[x].as_ref().unwrap(), &probe);
    }

    /// Central differences of `f` at every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            xp[[r, c]] += eps;
            xm[[r, c]] -= eps;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    /// Weighted sum of the output, so every output entry matters.
    fn probe(out: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(out.raw_dim(), |(i, j)| 0.3 + 0.7 * ((i * 7 + j * 3) % 5) as f64 - 1.1)
    }

    fn check_unary(x0: Array2<f64>, build: impl Fn(&mut Tape, NodeId) -> NodeId) {
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let n = t.leaf(x.clone());
            let o = build(&mut t, n);
            (t.value(o) * &probe(t.value(o))).sum()
        };
        let mut t = Tape::new();
        let n = t.leaf(x0.clone());
        let o = build(&mut t, n);
        let seed = probe(t.value(o));
        let mut grads = ParamSet::new().zero_grads();
        let g = t.backward(&[(o, seed)], &mut grads);
        assert_close(g[n].as_ref().unwrap(), &numeric_grad(&x0, f), 1e-6);
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.8, 0.1], [1.5, 0.2, -0.4, -0.9], [-0.7, 0.6, 0.05, 1.1]]
    }

    #[test]
    fn gelu_grad() {
        check_unary(sample(), |t, x| t.gelu(x));
    }

    #[test]
    fn row_normalize_grad() {
        check_unary(sample(), |t, x| t.row_normalize(x));
    }

    #[test]
    fn layer_norm_grad() {
        let gamma = array![[1.2, 0.7, -0.3, 0.9]];
        let beta = array![[0.1, -0.2, 0.3, 0.0]];
        check_unary(sample(), |t, x| {
            let gm = t.leaf(gamma.clone());
            let bt = t.leaf(beta.clone());
            t.layer_norm(x, gm, bt)
        });
    }

    #[test]
    fn masked_softmax_grad_and_zeros() {
        let mask: Mask = Arc::new(array![
            [true, false, false, false],
            [true, true, false, false],
            [true, true, true, true]
        ]);
        check_unary(sample(), |t, x| t.masked_softmax(x, mask.clone()));
        let mut t = Tape::new();
        let x = t.leaf(sample());
        let p = t.masked_softmax(x, mask.clone());
        let v = t.value(p);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[1, 2]], 0.0);
        assert!((v.row(2).sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_family_grads() {
        let w = array![[0.2, -0.5], [1.0, 0.3], [-0.8, 0.6], [0.4, 0.9]];
        check_unary(sample(), |t, x| {
            let wn = t.leaf(w.clone());
            t.matmul(x, wn)
        });
        check_unary(sample(), |t, x| t.matmul_t(x, x));
        check_unary(sample(), |t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_rows(x, 1, 2);
            let bb = t.slice_cols(b, 0, 2);
            let c = t.concat_rows(&[a, bb]);
            let d = t.concat_cols(&[c, c]);
            t.scale(d, -1.5)
        });
        check_unary(sample(), |t, x| {
            let r = t.slice_rows(x, 0, 1);
            let y = t.add_row(x, r);
            t.add(y, x)
        });
    }

    #[test]
    fn parameter_grads_accumulate_once_per_use() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", array![[2.0]], false);
        let mut t = Tape::new();
        let a = t.param(&ps, id);
        let b = t.param(&ps, id);
        assert_eq!(a, b);
        let y = t.matmul(a, b); // w^2
        let mut grads = ps.zero_grads();
        t.backward(&[(y, array![[1.0]])], &mut grads);
        assert_eq!(grads.get(id)[[0, 0]], 4.0);
    }
}
