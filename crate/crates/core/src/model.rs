//! Backbone, distance-based classifier and the training losses.
//!
//! Every loss has a tape builder used for training and, where tests need an
//! independent route, a graph-free evaluation on top of [`crate::geometry`].

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{huber_value, log_sum_exp, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Curvature, CurvatureSign, EPS_CURVATURE, EPS_DEGENERATE};
use crate::gis::SubmanifoldPool;
use crate::product::{self, FactorSpec, MixedSpace, ProductPoint};

/// Multi-layer perceptron with `tanh` between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    sizes: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
}

impl Backbone {
    /// Glorot-uniform weights scaled by `gain` on the output layer, zero biases.
    pub fn init<R: Rng>(
        sizes: &[usize],
        output_gain: f64,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid backbone sizes {sizes:?}")));
        }
        let mut layers = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let mut bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            if l + 2 == sizes.len() {
                bound *= output_gain;
            }
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            let wid = params.add(format!("backbone.{l}.weight"), Tensor::from_vec(fan_out, fan_in, data), true);
            let bid = params.add(format!("backbone.{l}.bias"), Tensor::zeros(1, fan_out), true);
            layers.push((wid, bid));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Graph forward pass for a `B × input_dim` batch.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Var {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(params, w);
            let bv = tape.param(params, b);
            h = tape.affine(h, wv, bv);
            if l + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Graph-free forward pass for one input.
    pub fn features(&self, params: &ParamSet, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::config(format!(
                "input dimension {} does not match backbone input {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut h = input.to_vec();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let (wt, bt) = (params.get(w), params.get(b));
            let mut next: Vec<f64> = (0..wt.rows())
                .map(|o| bt.data()[o] + wt.row(o).iter().zip(&h).map(|(a, x)| a * x).sum::<f64>())
                .collect();
            if l + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = next;
        }
        Ok(h)
    }
}

/// How the neighbor threshold τ₂ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tau2Policy {
    /// Mean `Ψ²` over same-class buffer pairs under the previous-step model.
    MeanSameClass,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureLossConfig {
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub tau2: Tau2Policy,
    /// Caps each repulsive (`e = −1`) term at `repulsion_cap_factor · τ₂` when set.
    pub repulsion_cap_factor: Option<f64>,
    pub pair_reduction: PairReduction,
    /// Divides the neighbor term by τ₂, making it unit-free.
    pub local_over_tau2: bool,
}

/// How pairwise structure terms are reduced over a buffer mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairReduction {
    Sum,
    /// Sum divided by the number of unordered pairs in the mini-batch.
    Mean,
}

impl PairReduction {
    fn factor(self, batch: usize) -> f64 {
        match self {
            Self::Sum => 1.0,
            Self::Mean => 2.0 / (batch * batch.saturating_sub(1)).max(1) as f64,
        }
    }
}

impl StructureLossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas_ok = [self.lambda_global, self.lambda_local].iter().all(|l| l.is_finite() && *l >= 0.0);
        let tau_ok = match self.tau2 {
            Tau2Policy::Fixed(t) => t.is_finite() && t >= 0.0,
            Tau2Policy::MeanSameClass => true,
        };
        let cap_ok = self.repulsion_cap_factor.is_none_or(|c| c.is_finite() && c > 0.0);
        if lambdas_ok && tau_ok && cap_ok {
            Ok(())
        } else {
            Err(Error::config("structure loss weights, tau2 and cap must be finite and non-negative"))
        }
    }
}

impl Default for StructureLossConfig {
    fn default() -> Self {
        Self {
            lambda_global: 1.0,
            lambda_local: 1.0,
            tau2: Tau2Policy::MeanSameClass,
            repulsion_cap_factor: None,
            pair_reduction: PairReduction::Mean,
            local_over_tau2: true,
        }
    }
}

/// Backbone, classifier, pool parameters and the active factor set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: ParamSet,
    pub backbone: Backbone,
    pub classifier: ParamId,
    pub curvature: ParamId,
    pub weights: ParamId,
    pub pool: SubmanifoldPool,
    /// Pool indices of the current mixed space, ascending.
    pub active: Vec<usize>,
}

impl ModelState {
    pub fn new<R: Rng>(
        sizes: &[usize],
        output_gain: f64,
        pool: SubmanifoldPool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let backbone = Backbone::init(sizes, output_gain, &mut params, rng)?;
        if pool.feature_dim() != backbone.feature_dim() {
            return Err(Error::config(format!(
                "pool slices {} coordinates but the backbone emits {}",
                pool.feature_dim(),
                backbone.feature_dim()
            )));
        }
        let d = backbone.feature_dim();
        let classifier = params.add("classifier", Tensor::zeros(0, d), true);
        let mags = pool.slots().iter().map(|s| s.initial_magnitude()).collect();
        let curvature = params.add("pool.curvature", Tensor::row_vector(mags), false);
        let xi = pool.len();
        let weights = params.add("pool.weight", Tensor::row_vector(vec![1.0 / xi as f64; xi]), false);
        Ok(Self {
            params,
            backbone,
            classifier,
            curvature,
            weights,
            pool,
            active: Vec::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.params.get(self.classifier).rows()
    }

    /// Appends `count` classifier rows drawn from `N(0, std²)`.
    pub fn add_classes<R: Rng>(&mut self, count: usize, std: f64, rng: &mut R) {
        let d = self.backbone.feature_dim();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..count * d).map(|_| normal.sample(rng)).collect();
        let rows = Tensor::from_vec(count, d, data);
        self.params.get_mut(self.classifier).append_rows(&rows);
    }

    pub fn curvature_magnitude(&self, j: usize) -> f64 {
        self.params.get(self.curvature).data()[j]
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.params.get(self.weights).data()[j]
    }

    pub fn curvature_of(&self, j: usize) -> Result<Curvature> {
        Curvature::from_parts(self.pool.slots()[j].sign, self.curvature_magnitude(j))
    }

    fn factor_spec(&self, j: usize) -> Result<FactorSpec> {
        let slot = &self.pool.slots()[j];
        Ok(FactorSpec {
            pool_index: j,
            slice_start: slot.slice_start,
            slice_end: slot.slice_end,
            curvature: self.curvature_of(j)?,
            weight: self.weight(j).max(0.0),
        })
    }

    /// The mixed space over `indices`, reading current curvatures and weights.
    pub fn space_of(&self, indices: &[usize]) -> Result<MixedSpace> {
        MixedSpace::new(indices.iter().map(|&j| self.factor_spec(j)).collect::<Result<_>>()?)
    }

    pub fn space(&self) -> Result<MixedSpace> {
        self.space_of(&self.active)
    }

    pub fn pool_indices(&self) -> Vec<usize> {
        (0..self.pool.len()).collect()
    }

    /// Clamps trainable curvature magnitudes to `≥ ε_K` and weights to `≥ 0`.
    pub fn project_pool_params(&mut self) {
        let signs: Vec<CurvatureSign> = self.pool.slots().iter().map(|s| s.sign).collect();
        for (m, sign) in self.params.get_mut(self.curvature).data_mut().iter_mut().zip(signs) {
            if sign != CurvatureSign::Flat {
                *m = m.max(EPS_CURVATURE);
            }
        }
        for a in self.params.get_mut(self.weights).data_mut() {
            *a = a.max(0.0);
        }
    }

    /// Classifier rows lifted into `space`.
    pub fn lifted_classifiers(&self, space: &MixedSpace) -> Result<Vec<ProductPoint>> {
        let w = self.params.get(self.classifier);
        (0..w.rows()).map(|l| product::lift(w.row(l), space)).collect()
    }

    /// `p(l | input)` over all classes in the active space, without a tape.
    pub fn class_probs_for(&self, input: &[f64]) -> Result<Vec<f64>> {
        let space = self.space()?;
        let x = product::lift(&self.backbone.features(&self.params, input)?, &space)?;
        class_probs(&x, &self.lifted_classifiers(&space)?)
    }

    /// Most probable class for each input in the active space.
    pub fn predict(&self, inputs: &[&[f64]]) -> Result<Vec<usize>> {
        let space = self.space()?;
        let classifiers = self.lifted_classifiers(&space)?;
        if classifiers.is_empty() {
            return Err(Error::contract("prediction with no classes"));
        }
        inputs
            .iter()
            .map(|x| {
                let p = product::lift(&self.backbone.features(&self.params, x)?, &space)?;
                let mut best = (0, f64::INFINITY);
                for (l, w) in classifiers.iter().enumerate() {
                    let d = product::product_sq_distance(&p, w)?;
                    if d < best.1 {
                        best = (l, d);
                    }
                }
                Ok(best.0)
            })
            .collect()
    }

    /// Graph: backbone features for a batch.
    pub fn features_graph(&self, tape: &mut Tape, inputs: &[&[f64]]) -> Var {
        let rows: Vec<Vec<f64>> = inputs.iter().map(|x| x.to_vec()).collect();
        let x = tape.constant(Tensor::from_rows(&rows));
        self.backbone.forward(tape, &self.params, x)
    }

    /// Graph: `|K_j|` as a 1×1 node.
    pub fn curvature_var(&self, tape: &mut Tape, curv: Var, j: usize) -> Var {
        tape.slice_cols(curv, j, 1)
    }

    /// Graph: `exp₀^{K_j}` of each factor's slice of `feats`, in `indices` order.
    pub fn lift_graph(&self, tape: &mut Tape, feats: Var, curv: Var, indices: &[usize]) -> Vec<Var> {
        indices
            .iter()
            .map(|&j| {
                let slot = &self.pool.slots()[j];
                let r = slot.range();
                let s = tape.slice_cols(feats, r.start, r.len());
                let k = self.curvature_var(tape, curv, j);
                tape.exp0(s, k, slot.sign)
            })
            .collect()
    }

    /// Graph: `B × n` matrix of `Σ_j c_j ψ_j²(x_j, w_{l j})`; `c_j = 1` unless weights are given.
    pub fn class_sq_dists(
        &self,
        tape: &mut Tape,
        feats: Var,
        indices: &[usize],
        weights: Option<Var>,
    ) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::contract("classification needs a non-empty mixed space"));
        }
        if self.num_classes() == 0 {
            return Err(Error::contract("classification needs at least one class"));
        }
        let curv = tape.param(&self.params, self.curvature);
        let w = tape.param(&self.params, self.classifier);
        let xs = self.lift_graph(tape, feats, curv, indices);
        let ws = self.lift_graph(tape, w, curv, indices);
        let mut total: Option<Var> = None;
        for ((&j, &x), &wl) in indices.iter().zip(&xs).zip(&ws) {
            let k = self.curvature_var(tape, curv, j);
            let mut d = tape.pair_sq_dist(x, wl, k, self.pool.slots()[j].sign);
            if let Some(a) = weights {
                let aj = tape.slice_cols(a, j, 1);
                d = tape.mul_scalar(d, aj);
            }
            total = Some(match total {
                None => d,
                Some(t) => tape.add(t, d),
            });
        }
        Ok(total.expect("non-empty indices"))
    }

    /// Cross-entropy of distance-softmax classification in the active space.
    pub fn ce_loss(&self, tape: &mut Tape, inputs: &[&[f64]], labels: &[usize]) -> Result<Var> {
        self.check_labels(labels)?;
        let feats = self.features_graph(tape, inputs);
        let d = self.class_sq_dists(tape, feats, &self.active, None)?;
        let logits = tape.scale(d, -1.0);
        Ok(tape.nll_softmax(logits, labels))
    }

    /// Weight-sum classification loss over every pool factor.
    pub fn weight_sum_loss(&self, tape: &mut Tape, inputs: &[&[f64]], labels: &[usize]) -> Result<Var> {
        self.check_labels(labels)?;
        let feats = self.features_graph(tape, inputs);
        let a = tape.param(&self.params, self.weights);
        let d = self.class_sq_dists(tape, feats, &self.pool_indices(), Some(a))?;
        let logits = tape.scale(d, -1.0);
        Ok(tape.nll_softmax(logits, labels))
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        let n = self.num_classes();
        match labels.iter().find(|&&y| y >= n) {
            Some(y) => Err(Error::contract(format!("label {y} outside the {n} seen classes"))),
            None => Ok(()),
        }
    }
}

/// `p(l | x) ∝ exp(−Ψ²(x, w_l))`.
pub fn class_probs(x: &ProductPoint, classifiers: &[ProductPoint]) -> Result<Vec<f64>> {
    if classifiers.is_empty() {
        return Err(Error::contract("class_probs with an empty classifier list"));
    }
    let logits: Vec<f64> = classifiers
        .iter()
        .map(|w| product::product_sq_distance(x, w).map(|d| -d))
        .collect::<Result<_>>()?;
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

/// Huber loss with the branch switch at `|a − b| = 1`.
pub fn huber(a: f64, b: f64) -> f64 {
    huber_value(a - b)
}

/// Within- and between-class neighbors of each buffer item under the previous model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub within: Vec<Vec<usize>>,
    pub between: Vec<Vec<usize>>,
}

/// `N_w(i) = {j : Ψ²_ij < τ₂, y_i = y_j}`, `N_b(i)` likewise with `y_i ≠ y_j`.
pub fn neighbor_sets(sq_dists: &Tensor, labels: &[usize], tau2: f64) -> NeighborSets {
    let n = labels.len();
    let mut within = vec![Vec::new(); n];
    let mut between = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            let d = sq_dists.get(i, j);
            if i == j || d.is_nan() || d >= tau2 {
                continue;
            }
            if labels[i] == labels[j] {
                within[i].push(j);
            } else {
                between[i].push(j);
            }
        }
    }
    NeighborSets { within, between }
}

/// Affinity `e = w − b ∈ {−1, 0, 1}` between items `i` and `j`.
pub fn affinity(i: usize, j: usize, sets: &NeighborSets) -> i8 {
    let w = sets.within[i].contains(&j) || sets.within[j].contains(&i);
    let b = sets.between[i].contains(&j) || sets.between[j].contains(&i);
    w as i8 - b as i8
}

/// Quantities the structure losses compare against, computed once per step from
/// the frozen previous-step model over the whole buffer.
#[derive(Debug, Clone)]
pub struct StructureReference {
    pub tau2: f64,
    /// Previous-step origin-tangent cosines; NaN where a tangent is degenerate.
    pub cosines: Tensor,
    pub affinity: Vec<Vec<i8>>,
    pub sq_dists: Tensor,
}

impl StructureReference {
    pub fn from_snapshot(
        snapshot: &ModelState,
        inputs: &[&[f64]],
        labels: &[usize],
        policy: Tau2Policy,
    ) -> Result<Self> {
        let n = inputs.len();
        let space = snapshot.space()?;
        let mut tangents = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        for x in inputs {
            let f = snapshot.backbone.features(&snapshot.params, x)?;
            let p = product::lift(&f, &space)?;
            tangents.push(product::product_log0(&p)?.concat());
            points.push(p);
        }
        let mut sq = Tensor::zeros(n, n);
        let mut cos = Tensor::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                let d = product::product_sq_distance(&points[i], &points[j])?;
                sq.set(i, j, d);
                sq.set(j, i, d);
                let c = crate::geometry::cosine(&tangents[i], &tangents[j]).unwrap_or(f64::NAN);
                cos.set(i, j, c);
                cos.set(j, i, c);
            }
        }
        let tau2 = match policy {
            Tau2Policy::Fixed(t) => t,
            Tau2Policy::MeanSameClass => mean_same_class(&sq, labels),
        };
        let sets = neighbor_sets(&sq, labels, tau2);
        let affinity = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0 } else { affinity(i, j, &sets) }).collect())
            .collect();
        Ok(Self {
            tau2,
            cosines: cos,
            affinity,
            sq_dists: sq,
        })
    }

    pub fn len(&self) -> usize {
        self.affinity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.affinity.is_empty()
    }
}

/// Mean of `Ψ²` over same-class pairs; 0 when there are none.
pub fn mean_same_class(sq: &Tensor, labels: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                sum += sq.get(i, j);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Angular-regularization output: the loss node and the number of skipped pairs.
pub struct AngularLoss {
    pub loss: Var,
    pub skipped_pairs: usize,
}

/// Graph: Huber penalty on changes of origin-tangent cosines over all unordered
/// pairs of the buffer mini-batch `batch` (indices into the buffer).
pub fn angular_reg_loss(
    tape: &mut Tape,
    current: &ModelState,
    lifted: &[Var],
    curv: Var,
    batch: &[usize],
    reference: &StructureReference,
) -> AngularLoss {
    let tangents: Vec<Var> = current
        .active
        .iter()
        .zip(lifted)
        .map(|(&j, &x)| {
            let k = current.curvature_var(tape, curv, j);
            tape.log0(x, k, current.pool.slots()[j].sign)
        })
        .collect();
    let q = tape.concat_cols(&tangents);
    let norms: Vec<f64> = {
        let qt = tape.value(q);
        (0..qt.rows()).map(|r| qt.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    };
    let u = tape.normalize_rows(q);
    let cos = tape.gram(u);
    let b = batch.len();
    let mut target = Tensor::zeros(b, b);
    let mut mask = Tensor::zeros(b, b);
    let mut skipped = 0;
    for i in 0..b {
        for j in i + 1..b {
            let prev = reference.cosines.get(batch[i], batch[j]);
            if prev.is_nan() || norms[i] < EPS_DEGENERATE || norms[j] < EPS_DEGENERATE {
                skipped += 1;
                continue;
            }
            target.set(i, j, prev);
            mask.set(i, j, 1.0);
        }
    }
    let t = tape.constant(target);
    let h = tape.huber(cos, t);
    AngularLoss {
        loss: tape.weighted_sum(h, mask),
        skipped_pairs: skipped,
    }
}

/// Graph: `Σ_{pairs} e · Ψ²(x_i, x_j)` over the buffer mini-batch.
pub fn neighbor_robustness_loss(
    tape: &mut Tape,
    current: &ModelState,
    lifted: &[Var],
    curv: Var,
    batch: &[usize],
    reference: &StructureReference,
    repulsion_cap: Option<f64>,
) -> Var {
    let mut pairs = Vec::new();
    let mut coeff = Vec::new();
    for i in 0..batch.len() {
        for j in i + 1..batch.len() {
            let e = reference.affinity[batch[i]][batch[j]];
            if e != 0 {
                pairs.push((i, j));
                coeff.push(e as f64);
            }
        }
    }
    if pairs.is_empty() {
        return tape.scalar_constant(0.0);
    }
    let mut total: Option<Var> = None;
    for (&j, &x) in current.active.iter().zip(lifted) {
        let k = current.curvature_var(tape, curv, j);
        let d = tape.indexed_sq_dist(x, &pairs, k, current.pool.slots()[j].sign);
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d),
        });
    }
    let psi2 = total.expect("active space is non-empty");
    let p = pairs.len();
    match repulsion_cap {
        None => tape.weighted_sum(psi2, Tensor::from_vec(p, 1, coeff)),
        Some(cap) => {
            let attract = coeff.iter().map(|&e| e.max(0.0)).collect();
            let repel = coeff.iter().map(|&e| e.min(0.0)).collect();
            let capped = tape.min_const(psi2, cap);
            let a = tape.weighted_sum(psi2, Tensor::from_vec(p, 1, attract));
            let r = tape.weighted_sum(capped, Tensor::from_vec(p, 1, repel));
            tape.add(a, r)
        }
    }
}

/// `L = L_ce + λ₁ L_global + λ₂ L_local`; absent structure terms count as zero.
pub fn total_loss(
    tape: &mut Tape,
    ce: Var,
    global: Option<Var>,
    local: Option<Var>,
    cfg: &StructureLossConfig,
) -> Var {
    let mut l = ce;
    if let Some(g) = global {
        if cfg.lambda_global != 0.0 {
            let s = tape.scale(g, cfg.lambda_global);
            l = tape.add(l, s);
        }
    }
    if let Some(g) = local {
        if cfg.lambda_local != 0.0 {
            let s = tape.scale(g, cfg.lambda_local);
            l = tape.add(l, s);
        }
    }
    l
}

/// Builds the full step loss on one tape: cross-entropy on `(inputs, labels)` plus,
/// when a reference exists, structure terms on the buffer mini-batch.
pub struct StepBatch<'a> {
    pub inputs: &'a [&'a [f64]],
    pub labels: &'a [usize],
    pub buffer_inputs: &'a [&'a [f64]],
    pub buffer_batch: &'a [usize],
}

pub struct StepLoss {
    pub total: Var,
    pub ce: Var,
    pub global: Option<Var>,
    pub local: Option<Var>,
    pub skipped_pairs: usize,
}

pub fn step_loss(
    tape: &mut Tape,
    state: &ModelState,
    batch: &StepBatch<'_>,
    reference: Option<&StructureReference>,
    cfg: &StructureLossConfig,
) -> Result<StepLoss> {
    let ce = state.ce_loss(tape, batch.inputs, batch.labels)?;
    let use_structure = reference.is_some()
        && batch.buffer_batch.len() >= 2
        && (cfg.lambda_global != 0.0 || cfg.lambda_local != 0.0);
    let (mut global, mut local, mut skipped) = (None, None, 0);
    if use_structure {
        let reference = reference.expect("checked above");
        let rows: Vec<&[f64]> = batch.buffer_batch.iter().map(|&i| batch.buffer_inputs[i]).collect();
        let feats = state.features_graph(tape, &rows);
        let curv = tape.param(&state.params, state.curvature);
        let lifted = state.lift_graph(tape, feats, curv, &state.active);
        if cfg.lambda_global != 0.0 {
            let a = angular_reg_loss(tape, state, &lifted, curv, batch.buffer_batch, reference);
            skipped = a.skipped_pairs;
            global = Some(a.loss);
        }
        if cfg.lambda_local != 0.0 {
            let cap = cfg.repulsion_cap_factor.map(|f| f * reference.tau2);
            local = Some(neighbor_robustness_loss(
                tape,
                state,
                &lifted,
                curv,
                batch.buffer_batch,
                reference,
                cap,
            ));
        }
    }
    let r = cfg.pair_reduction.factor(batch.buffer_batch.len());
    let rl = r * local_scale(reference, cfg);
    if r != 1.0 {
        global = global.map(|g| tape.scale(g, r));
    }
    if rl != 1.0 {
        local = local.map(|l| tape.scale(l, rl));
    }
    let total = total_loss(tape, ce, global, local, cfg);
    Ok(StepLoss {
        total,
        ce,
        global,
        local,
        skipped_pairs: skipped,
    })
}

fn local_scale(reference: Option<&StructureReference>, cfg: &StructureLossConfig) -> f64 {
    match reference {
        Some(r) if cfg.local_over_tau2 && r.tau2 > 0.0 => 1.0 / r.tau2,
        _ => 1.0,
    }
}

/// Graph-free evaluation of the same step loss, for cross-checking the tape.
pub fn step_loss_plain(
    state: &ModelState,
    batch: &StepBatch<'_>,
    reference: Option<&StructureReference>,
    cfg: &StructureLossConfig,
) -> Result<(f64, f64, f64, f64)> {
    let space = state.space()?;
    let classifiers = state.lifted_classifiers(&space)?;
    let mut ce = 0.0;
    for (x, &y) in batch.inputs.iter().zip(batch.labels) {
        let p = product::lift(&state.backbone.features(&state.params, x)?, &space)?;
        ce -= class_probs(&p, &classifiers)?[y].ln();
    }
    ce /= batch.inputs.len() as f64;
    let (mut global, mut local) = (0.0, 0.0);
    if let Some(reference) = reference {
        let b = batch.buffer_batch;
        let mut pts = Vec::new();
        let mut tans = Vec::new();
        for &i in b {
            let p = product::lift(&state.backbone.features(&state.params, batch.buffer_inputs[i])?, &space)?;
            tans.push(product::product_log0(&p)?.concat());
            pts.push(p);
        }
        for i in 0..b.len() {
            for j in i + 1..b.len() {
                let prev = reference.cosines.get(b[i], b[j]);
                if let (false, Ok(c)) = (prev.is_nan(), crate::geometry::cosine(&tans[i], &tans[j])) {
                    global += huber(c, prev);
                }
                let e = reference.affinity[b[i]][b[j]] as f64;
                if e != 0.0 {
                    let mut d = product::product_sq_distance(&pts[i], &pts[j])?;
                    if e < 0.0 {
                        if let Some(f) = cfg.repulsion_cap_factor {
                            d = d.min(f * reference.tau2);
                        }
                    }
                    local += e * d;
                }
            }
        }
    }
    let r = cfg.pair_reduction.factor(batch.buffer_batch.len());
    let (global, local) = (r * global, r * local_scale(reference, cfg) * local);
    let total = ce + cfg.lambda_global * global + cfg.lambda_local * local;
    Ok((total, ce, global, local))
}

#[cfg(test)]
/// Graph-free squared distances between lifted features via the scalar kernel.
pub(crate) fn kernel_sq_dist(x: &[f64], y: &[f64], k: Curvature) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    crate::kernels::sq_dist(dot(x, x), dot(y, y), dot(x, y), k.magnitude(), k.sign())
}
