//! Tensor-level reverse-mode tape.
//!
//! Each node stores its forward value and the operation that produced it. Nodes
//! are appended in evaluation order, so a single reverse sweep over the node list
//! visits every node after all of its consumers.

use super::dual::Dual;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::CurvatureSign;
use crate::kernels;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate backward-pass faults, used to check that gradient verification
/// catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Differentiate `K < 0` curvature kernels as if they were on the `tan` branch.
    CurvatureBranchSign,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Affine { x: Var, w: Var, b: Var },
    Tanh(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    Exp0 { x: Var, mag: Var, sign: CurvatureSign },
    Log0 { x: Var, mag: Var, sign: CurvatureSign },
    MobiusAdd { x: Var, y: Var, mag: Var, sign: CurvatureSign },
    PairSqDist { x: Var, y: Var, mag: Var, sign: CurvatureSign },
    IndexedSqDist { x: Var, pairs: Vec<(usize, usize)>, mag: Var, sign: CurvatureSign },
    NormalizeRows(Var),
    Gram(Var),
    Huber(Var, Var),
    WeightedSum(Var, Tensor),
    MinConst(Var, f64),
    NllSoftmax { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::Exp0 { .. } => "exp0",
            Op::Log0 { .. } => "log0",
            Op::MobiusAdd { .. } => "mobius_add",
            Op::PairSqDist { .. } => "pair_sq_dist",
            Op::IndexedSqDist { .. } => "indexed_sq_dist",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::Gram(_) => "gram",
            Op::Huber(..) => "huber",
            Op::WeightedSum(..) => "weighted_sum",
            Op::MinConst(..) => "min_const",
            Op::NllSoftmax { .. } => "nll_softmax",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Gradients of the trainable parameters reached from a loss.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.iter().all(Option::is_none)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    nonfinite: Option<&'static str>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
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

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// First non-finite value produced during the forward pass, as an error.
    pub fn check(&self) -> Result<()> {
        match self.nonfinite {
            None => Ok(()),
            Some(tag) => Err(Error::numerical(tag, "non-finite value in forward pass")),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(op.tag());
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- leaves ----

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a parameter; only trainable parameters receive gradients.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let trainable = params.is_trainable(id);
        let v = self.push(params.get(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.nodes[v.0].param = Some(id);
        }
        v
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        assert_eq!(x.shape(), y.shape(), "add: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        assert_eq!(x.shape(), y.shape(), "sub: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        assert_eq!(x.shape(), y.shape(), "mul: shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).map(|x| c * x);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `s · a` with `s` a 1×1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.val(s).item();
        let out = self.val(a).map(|x| k * x);
        let ng = self.ng(&[a, s]);
        self.push(out, Op::MulScalar(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    /// `min(a, cap)` elementwise.
    pub fn min_const(&mut self, a: Var, cap: f64) -> Var {
        let out = self.val(a).map(|x| x.min(cap));
        let ng = self.ng(&[a]);
        self.push(out, Op::MinConst(a, cap), ng)
    }

    /// Elementwise Huber loss with the quadratic/linear switch at `|a − b| = 1`.
    pub fn huber(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.val(a), self.val(b));
        assert_eq!(x.shape(), y.shape(), "huber: shape mismatch");
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| huber_value(p - q))
            .collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Huber(a, b), ng)
    }

    // ---- shape ----

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.val(x);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(t.rows(), len, data);
        let ng = self.ng(&[x]);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.val(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.val(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.val(*p);
                assert_eq!(t.rows(), rows, "concat_cols: row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data);
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// `Σ w ⊙ a` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Var {
        let t = self.val(a);
        assert_eq!(t.shape(), weights.shape(), "weighted_sum: shape mismatch");
        let s = t.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), ng)
    }

    // ---- linear algebra ----

    /// `x Wᵀ + b` for `x: B×in`, `W: out×in`, `b: 1×out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xt, wt, bt) = (self.val(x), self.val(w), self.val(b));
        assert_eq!(xt.cols(), wt.cols(), "affine: input dim mismatch");
        assert_eq!(bt.shape(), (1, wt.rows()), "affine: bias shape mismatch");
        let mut out = Tensor::zeros(xt.rows(), wt.rows());
        for i in 0..xt.rows() {
            let xi = xt.row(i);
            let oi = out.row_mut(i);
            for (o, slot) in oi.iter_mut().enumerate() {
                *slot = bt.data()[o] + dot(xi, wt.row(o));
            }
        }
        let ng = self.ng(&[x, w, b]);
        self.push(out, Op::Affine { x, w, b }, ng)
    }

    /// Each row divided by its norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let mut out = t.clone();
        for r in 0..t.rows() {
            let n = dot(t.row(r), t.row(r)).sqrt();
            if n > 0.0 {
                out.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::NormalizeRows(a), ng)
    }

    /// `a aᵀ`: all pairwise row inner products.
    pub fn gram(&mut self, a: Var) -> Var {
        let t = self.val(a);
        let n = t.rows();
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(t.row(i), t.row(j));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::Gram(a), ng)
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn nll_softmax(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.val(logits);
        assert_eq!(t.rows(), labels.len(), "nll_softmax: label count mismatch");
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            assert!(y < row.len(), "nll_softmax: label out of range");
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        let ng = self.ng(&[logits]);
        self.push(
            out,
            Op::NllSoftmax {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    // ---- curvature kernels ----

    /// Row-wise `exp₀^K`. `mag` is a 1×1 node holding `|K|`.
    pub fn exp0(&mut self, x: Var, mag: Var, sign: CurvatureSign) -> Var {
        let k = self.val(mag).item();
        let out = rowwise_scale(self.val(x), |n2| kernels::exp0_scale(n2, k, sign));
        let ng = self.ng(&[x, mag]);
        self.push(out, Op::Exp0 { x, mag, sign }, ng)
    }

    /// Row-wise `log₀^K`.
    pub fn log0(&mut self, x: Var, mag: Var, sign: CurvatureSign) -> Var {
        let k = self.val(mag).item();
        let out = rowwise_scale(self.val(x), |n2| kernels::log0_scale(n2, k, sign));
        let ng = self.ng(&[x, mag]);
        self.push(out, Op::Log0 { x, mag, sign }, ng)
    }

    /// Row-wise `x_i ⊕_K y_i`.
    pub fn mobius_add(&mut self, x: Var, y: Var, mag: Var, sign: CurvatureSign) -> Var {
        let k = self.val(mag).item();
        let (xt, yt) = (self.val(x), self.val(y));
        assert_eq!(xt.shape(), yt.shape(), "mobius_add: shape mismatch");
        let mut out = Tensor::zeros(xt.rows(), xt.cols());
        for r in 0..xt.rows() {
            let (xr, yr) = (xt.row(r), yt.row(r));
            let (p, q) = kernels::mobius_coefs(dot(xr, xr), dot(yr, yr), dot(xr, yr), k, sign);
            for ((o, a), b) in out.row_mut(r).iter_mut().zip(xr).zip(yr) {
                *o = p * a + q * b;
            }
        }
        let ng = self.ng(&[x, y, mag]);
        self.push(out, Op::MobiusAdd { x, y, mag, sign }, ng)
    }

    /// `ψ_K²(x_i, y_l)` for every row pair, shape `rows(x) × rows(y)`.
    pub fn pair_sq_dist(&mut self, x: Var, y: Var, mag: Var, sign: CurvatureSign) -> Var {
        let k = self.val(mag).item();
        let (xt, yt) = (self.val(x), self.val(y));
        assert_eq!(xt.cols(), yt.cols(), "pair_sq_dist: dim mismatch");
        let xn: Vec<f64> = (0..xt.rows()).map(|i| dot(xt.row(i), xt.row(i))).collect();
        let yn: Vec<f64> = (0..yt.rows()).map(|l| dot(yt.row(l), yt.row(l))).collect();
        let mut out = Tensor::zeros(xt.rows(), yt.rows());
        for i in 0..xt.rows() {
            for l in 0..yt.rows() {
                let c = dot(xt.row(i), yt.row(l));
                out.set(i, l, kernels::sq_dist(xn[i], yn[l], c, k, sign));
            }
        }
        let ng = self.ng(&[x, y, mag]);
        self.push(out, Op::PairSqDist { x, y, mag, sign }, ng)
    }

    /// `ψ_K²(x_i, x_j)` for the listed row pairs, shape `pairs × 1`.
    pub fn indexed_sq_dist(
        &mut self,
        x: Var,
        pairs: &[(usize, usize)],
        mag: Var,
        sign: CurvatureSign,
    ) -> Var {
        let k = self.val(mag).item();
        let xt = self.val(x);
        let data = pairs
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (xt.row(i), xt.row(j));
                kernels::sq_dist(dot(a, a), dot(b, b), dot(a, b), k, sign)
            })
            .collect();
        let out = Tensor::from_vec(pairs.len(), 1, data);
        let ng = self.ng(&[x, mag]);
        self.push(
            out,
            Op::IndexedSqDist {
                x,
                pairs: pairs.to_vec(),
                mag,
                sign,
            },
            ng,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a 1×1 loss; returns gradients of trainable parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check()?;
        if self.val(loss).shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(pid) = node.param {
                if grads.by_param.len() <= pid.0 {
                    grads.by_param.resize(pid.0 + 1, None);
                }
                match &mut grads.by_param[pid.0] {
                    Some(t) => t.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut adj);
        }
        Ok(grads)
    }

    fn acc<'a>(&self, adj: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut adj[v.0];
        if slot.is_none() {
            let (r, c) = self.nodes[v.0].value.shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        slot.as_mut()
    }

    fn kernel_sign(&self, sign: CurvatureSign) -> CurvatureSign {
        match (self.fault, sign) {
            (Some(Fault::CurvatureBranchSign), CurvatureSign::Negative) => CurvatureSign::Positive,
            _ => sign,
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(t) = self.acc(adj, *a) {
                    t.add_assign(g);
                }
                if let Some(t) = self.acc(adj, *b) {
                    t.add_assign(g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(t) = self.acc(adj, *a) {
                    t.add_assign(g);
                }
                if let Some(t) = self.acc(adj, *b) {
                    for (s, d) in t.data_mut().iter_mut().zip(g.data()) {
                        *s -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).clone(), self.val(*b).clone());
                if let Some(t) = self.acc(adj, *a) {
                    for ((s, d), y) in t.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *s += d * y;
                    }
                }
                if let Some(t) = self.acc(adj, *b) {
                    for ((s, d), x) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *s += d * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(t) = self.acc(adj, *a) {
                    for (s, d) in t.data_mut().iter_mut().zip(g.data()) {
                        *s += c * d;
                    }
                }
            }
            Op::MulScalar(a, k) => {
                let kv = self.val(*k).item();
                let gk: f64 = g.data().iter().zip(self.val(*a).data()).map(|(d, x)| d * x).sum();
                if let Some(t) = self.acc(adj, *a) {
                    for (s, d) in t.data_mut().iter_mut().zip(g.data()) {
                        *s += kv * d;
                    }
                }
                if let Some(t) = self.acc(adj, *k) {
                    t.data_mut()[0] += gk;
                }
            }
            Op::Affine { x, w, b } => {
                let (xt, wt) = (self.val(*x), self.val(*w));
                if let Some(t) = self.acc(adj, *x) {
                    for i in 0..g.rows() {
                        let gi = g.row(i);
                        let ti = t.row_mut(i);
                        for (o, &go) in gi.iter().enumerate() {
                            if go != 0.0 {
                                axpy(ti, go, wt.row(o));
                            }
                        }
                    }
                }
                if let Some(t) = self.acc(adj, *w) {
                    for i in 0..g.rows() {
                        let xi = xt.row(i);
                        for (o, &go) in g.row(i).iter().enumerate() {
                            if go != 0.0 {
                                axpy(t.row_mut(o), go, xi);
                            }
                        }
                    }
                }
                if let Some(t) = self.acc(adj, *b) {
                    for i in 0..g.rows() {
                        axpy(t.data_mut(), 1.0, g.row(i));
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(t) = self.acc(adj, *a) {
                    for ((s, d), y) in t.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *s += d * (1.0 - y * y);
                    }
                }
            }
            Op::MinConst(a, cap) => {
                let av = self.val(*a).clone();
                if let Some(t) = self.acc(adj, *a) {
                    for ((s, d), x) in t.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if *x < *cap {
                            *s += d;
                        }
                    }
                }
            }
            Op::Huber(a, b) => {
                let diff: Vec<f64> = self
                    .val(*a)
                    .data()
                    .iter()
                    .zip(self.val(*b).data())
                    .map(|(p, q)| huber_slope(p - q))
                    .collect();
                if let Some(t) = self.acc(adj, *a) {
                    for ((s, d), h) in t.data_mut().iter_mut().zip(g.data()).zip(&diff) {
                        *s += d * h;
                    }
                }
                if let Some(t) = self.acc(adj, *b) {
                    for ((s, d), h) in t.data_mut().iter_mut().zip(g.data()).zip(&diff) {
                        *s -= d * h;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(t) = self.acc(adj, *x) {
                    for r in 0..g.rows() {
                        let dst = &mut t.row_mut(r)[*start..*start + g.cols()];
                        axpy(dst, 1.0, g.row(r));
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    if let Some(t) = self.acc(adj, *p) {
                        for r in 0..g.rows() {
                            axpy(t.row_mut(r), 1.0, &g.row(r)[off..off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::SumAll(a) => {
                let d = g.item();
                if let Some(t) = self.acc(adj, *a) {
                    t.data_mut().iter_mut().for_each(|s| *s += d);
                }
            }
            Op::MeanAll(a) => {
                let n = self.val(*a).len() as f64;
                let d = g.item() / n;
                if let Some(t) = self.acc(adj, *a) {
                    t.data_mut().iter_mut().for_each(|s| *s += d);
                }
            }
            Op::WeightedSum(a, w) => {
                let d = g.item();
                if let Some(t) = self.acc(adj, *a) {
                    axpy(t.data_mut(), d, w.data());
                }
            }
            Op::NormalizeRows(a) => {
                let at = self.val(*a);
                let mut contrib = Tensor::zeros(at.rows(), at.cols());
                for r in 0..at.rows() {
                    let n = dot(at.row(r), at.row(r)).sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let u = out.row(r);
                    let ug = dot(u, g.row(r));
                    for ((c, gv), uv) in contrib.row_mut(r).iter_mut().zip(g.row(r)).zip(u) {
                        *c = (gv - uv * ug) / n;
                    }
                }
                if let Some(t) = self.acc(adj, *a) {
                    t.add_assign(&contrib);
                }
            }
            Op::Gram(a) => {
                let at = self.val(*a).clone();
                if let Some(t) = self.acc(adj, *a) {
                    let n = at.rows();
                    for i in 0..n {
                        for j in 0..n {
                            let c = g.get(i, j) + g.get(j, i);
                            if c != 0.0 {
                                axpy(t.row_mut(i), c, at.row(j));
                            }
                        }
                    }
                }
            }
            Op::NllSoftmax { logits, labels } => {
                let lt = self.val(*logits);
                let scale = g.item() / labels.len() as f64;
                let mut contrib = Tensor::zeros(lt.rows(), lt.cols());
                for (r, &y) in labels.iter().enumerate() {
                    let row = lt.row(r);
                    let lse = log_sum_exp(row);
                    for (c, (o, &z)) in contrib.row_mut(r).iter_mut().zip(row).enumerate() {
                        let p = (z - lse).exp();
                        *o = scale * (p - if c == y { 1.0 } else { 0.0 });
                    }
                }
                if let Some(t) = self.acc(adj, *logits) {
                    t.add_assign(&contrib);
                }
            }
            Op::Exp0 { x, mag, sign } => {
                self.backprop_rowwise_scale(*x, *mag, *sign, g, adj, kernels::exp0_scale);
            }
            Op::Log0 { x, mag, sign } => {
                self.backprop_rowwise_scale(*x, *mag, *sign, g, adj, kernels::log0_scale);
            }
            Op::MobiusAdd { x, y, mag, sign } => {
                let k = self.val(*mag).item();
                let ks = self.kernel_sign(*sign);
                let (xt, yt) = (self.val(*x), self.val(*y));
                let mut gx = Tensor::zeros(xt.rows(), xt.cols());
                let mut gy = Tensor::zeros(yt.rows(), yt.cols());
                let mut gk = 0.0;
                for r in 0..xt.rows() {
                    let (xr, yr, gr) = (xt.row(r), yt.row(r), g.row(r));
                    let (p, q) = kernels::mobius_coefs(
                        Dual::<4>::var(dot(xr, xr), 0),
                        Dual::var(dot(yr, yr), 1),
                        Dual::var(dot(xr, yr), 2),
                        Dual::var(k, 3),
                        ks,
                    );
                    let (gdx, gdy) = (dot(gr, xr), dot(gr, yr));
                    let l: [f64; 4] = std::array::from_fn(|v| gdx * p.d[v] + gdy * q.d[v]);
                    let gxr = gx.row_mut(r);
                    axpy(gxr, p.v, gr);
                    axpy(gxr, 2.0 * l[0], xr);
                    axpy(gxr, l[2], yr);
                    let gyr = gy.row_mut(r);
                    axpy(gyr, q.v, gr);
                    axpy(gyr, 2.0 * l[1], yr);
                    axpy(gyr, l[2], xr);
                    gk += l[3];
                }
                if let Some(t) = self.acc(adj, *x) {
                    t.add_assign(&gx);
                }
                if let Some(t) = self.acc(adj, *y) {
                    t.add_assign(&gy);
                }
                if let Some(t) = self.acc(adj, *mag) {
                    t.data_mut()[0] += gk;
                }
            }
            Op::PairSqDist { x, y, mag, sign } => {
                let k = self.val(*mag).item();
                let ks = self.kernel_sign(*sign);
                let (xt, yt) = (self.val(*x), self.val(*y));
                let xn: Vec<f64> = (0..xt.rows()).map(|i| dot(xt.row(i), xt.row(i))).collect();
                let yn: Vec<f64> = (0..yt.rows()).map(|l| dot(yt.row(l), yt.row(l))).collect();
                let mut gx = Tensor::zeros(xt.rows(), xt.cols());
                let mut gy = Tensor::zeros(yt.rows(), yt.cols());
                let mut gk = 0.0;
                for i in 0..xt.rows() {
                    for l in 0..yt.rows() {
                        let gil = g.get(i, l);
                        if gil == 0.0 {
                            continue;
                        }
                        let (xi, yl) = (xt.row(i), yt.row(l));
                        let f = sq_dist_dual(xn[i], yn[l], dot(xi, yl), k, ks);
                        axpy(gx.row_mut(i), 2.0 * gil * f.d[0], xi);
                        axpy(gx.row_mut(i), gil * f.d[2], yl);
                        axpy(gy.row_mut(l), 2.0 * gil * f.d[1], yl);
                        axpy(gy.row_mut(l), gil * f.d[2], xi);
                        gk += gil * f.d[3];
                    }
                }
                if let Some(t) = self.acc(adj, *x) {
                    t.add_assign(&gx);
                }
                if let Some(t) = self.acc(adj, *y) {
                    t.add_assign(&gy);
                }
                if let Some(t) = self.acc(adj, *mag) {
                    t.data_mut()[0] += gk;
                }
            }
            Op::IndexedSqDist { x, pairs, mag, sign } => {
                let k = self.val(*mag).item();
                let ks = self.kernel_sign(*sign);
                let xt = self.val(*x);
                let mut gx = Tensor::zeros(xt.rows(), xt.cols());
                let mut gk = 0.0;
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let gp = g.data()[p];
                    if gp == 0.0 {
                        continue;
                    }
                    let (xi, xj) = (xt.row(i), xt.row(j));
                    let f = sq_dist_dual(dot(xi, xi), dot(xj, xj), dot(xi, xj), k, ks);
                    axpy(gx.row_mut(i), 2.0 * gp * f.d[0], xi);
                    axpy(gx.row_mut(i), gp * f.d[2], xj);
                    axpy(gx.row_mut(j), 2.0 * gp * f.d[1], xj);
                    axpy(gx.row_mut(j), gp * f.d[2], xi);
                    gk += gp * f.d[3];
                }
                if let Some(t) = self.acc(adj, *x) {
                    t.add_assign(&gx);
                }
                if let Some(t) = self.acc(adj, *mag) {
                    t.data_mut()[0] += gk;
                }
            }
        }
    }

    fn backprop_rowwise_scale(
        &self,
        x: Var,
        mag: Var,
        sign: CurvatureSign,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
        scale: fn(Dual<2>, Dual<2>, CurvatureSign) -> Dual<2>,
    ) {
        let k = self.val(mag).item();
        let ks = self.kernel_sign(sign);
        let xt = self.val(x);
        let mut gx = Tensor::zeros(xt.rows(), xt.cols());
        let mut gk = 0.0;
        for r in 0..xt.rows() {
            let (xr, gr) = (xt.row(r), g.row(r));
            let phi = scale(Dual::var(dot(xr, xr), 0), Dual::var(k, 1), ks);
            let gdx = dot(gr, xr);
            let row = gx.row_mut(r);
            axpy(row, phi.v, gr);
            axpy(row, 2.0 * phi.d[0] * gdx, xr);
            gk += phi.d[1] * gdx;
        }
        if let Some(t) = self.acc(adj, x) {
            t.add_assign(&gx);
        }
        if let Some(t) = self.acc(adj, mag) {
            t.data_mut()[0] += gk;
        }
    }
}

#[inline]
fn sq_dist_dual(a: f64, b: f64, c: f64, k: f64, sign: CurvatureSign) -> Dual<4> {
    kernels::sq_dist(
        Dual::var(a, 0),
        Dual::var(b, 1),
        Dual::var(c, 2),
        Dual::var(k, 3),
        sign,
    )
}

fn rowwise_scale(t: &Tensor, phi: impl Fn(f64) -> f64) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let row = out.row_mut(r);
        let s = phi(dot(row, row));
        row.iter_mut().for_each(|v| *v *= s);
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

pub(crate) fn huber_value(d: f64) -> f64 {
    let a = d.abs();
    if a <= 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn huber_slope(d: f64) -> f64 {
    d.clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_graph_value() {
        let mut t = Tape::new();
        let c = t.scalar_constant(3.5);
        assert_eq!(t.scalar(c), 3.5);
    }

    #[test]
    fn sum_of_two_leaves_is_elementwise() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::row_vector(vec![0.5, -4.0]));
        let s = t.add(a, b);
        assert_eq!(t.value(s).data(), &[1.5, -2.0]);
    }

    #[test]
    fn quadratic_gradient_is_twice_input() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::row_vector(vec![1.0, -2.0, 0.5]), true);
        let mut t = Tape::new();
        let x = t.param(&params, id);
        let sq = t.mul(x, x);
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn huber_quadratic_branch_gradient() {
        let mut params = ParamSet::new();
        let id = params.add("a", Tensor::scalar(0.7), true);
        let mut t = Tape::new();
        let a = t.param(&params, id);
        let b = t.scalar_constant(0.2);
        let h = t.huber(a, b);
        let loss = t.sum(h);
        let g = t.backward(loss).unwrap();
        assert!((g.get(id).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_trainable_params_are_skipped() {
        let mut params = ParamSet::new();
        let a = params.add("a", Tensor::scalar(2.0), true);
        let b = params.add("b", Tensor::scalar(3.0), false);
        let mut t = Tape::new();
        let va = t.param(&params, a);
        let vb = t.param(&params, b);
        let p = t.mul(va, vb);
        let g = t.backward(p).unwrap();
        assert_eq!(g.get(a).unwrap().item(), 3.0);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![2.0]));
        let k = t.scalar_constant(1.0);
        // artanh(2) is undefined on the unit ball.
        let l = t.log0(x, k, CurvatureSign::Negative);
        let s = t.sum(l);
        match t.backward(s) {
            Err(Error::NumericalDomain { op, .. }) => assert_eq!(op, "log0"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }
}
