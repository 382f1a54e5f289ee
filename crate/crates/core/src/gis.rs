//! Submanifold pool, weight-sum search over it, thresholded selection and
//! growth of the mixed space across steps.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::CurvatureSign;
use crate::harness::shuffled_batches;
use crate::model::ModelState;

/// One pool member. Slice bounds are 1-based and inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSlot {
    pub pool_index: usize,
    pub slice_start: usize,
    pub slice_end: usize,
    pub sign: CurvatureSign,
}

impl PoolSlot {
    pub fn dim(&self) -> usize {
        self.slice_end + 1 - self.slice_start
    }

    pub fn range(&self) -> Range<usize> {
        self.slice_start - 1..self.slice_end
    }

    /// 1 for curved slots, 0 for flat ones.
    pub fn initial_magnitude(&self) -> f64 {
        match self.sign {
            CurvatureSign::Flat => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignPolicy {
    /// First half of the pool negative, second half positive.
    Split,
    Negative,
    Positive,
    /// Zero-curvature slots; the space is Euclidean with `ψ = 2‖x − y‖`.
    Flat,
}

/// Fixed set of factors; slices, count and signs never change after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmanifoldPool {
    feature_dim: usize,
    slots: Vec<PoolSlot>,
}

impl SubmanifoldPool {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn slots(&self) -> &[PoolSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Tiles `d` sequentially with `d / s` contiguous slices for each size `s`.
pub fn build_pool(d: usize, sizes: &[usize], policy: SignPolicy) -> Result<SubmanifoldPool> {
    if d == 0 || sizes.is_empty() {
        return Err(Error::config("pool needs a positive feature dimension and at least one size"));
    }
    let mut slots = Vec::new();
    for &s in sizes {
        if s == 0 || !d.is_multiple_of(s) {
            return Err(Error::config(format!("factor size {s} does not divide feature dimension {d}")));
        }
        for k in 0..d / s {
            slots.push((k * s + 1, (k + 1) * s));
        }
    }
    let xi = slots.len();
    let slots = slots
        .into_iter()
        .enumerate()
        .map(|(i, (start, end))| PoolSlot {
            pool_index: i,
            slice_start: start,
            slice_end: end,
            sign: match policy {
                SignPolicy::Split if i < xi / 2 => CurvatureSign::Negative,
                SignPolicy::Split | SignPolicy::Positive => CurvatureSign::Positive,
                SignPolicy::Negative => CurvatureSign::Negative,
                SignPolicy::Flat => CurvatureSign::Flat,
            },
        })
        .collect();
    Ok(SubmanifoldPool { feature_dim: d, slots })
}

/// `Q = {j : a_j > τ₁}`. On the first step an empty result falls back to the
/// single highest-weight factor.
pub fn select(weights: &[f64], tau1: f64, first_step: bool) -> Vec<usize> {
    let q: Vec<usize> = (0..weights.len()).filter(|&j| weights[j] > tau1).collect();
    if q.is_empty() && first_step && !weights.is_empty() {
        let best = (0..weights.len())
            .max_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(b.cmp(&a)))
            .expect("non-empty weights");
        return vec![best];
    }
    q
}

/// Per-step selections `Q¹ … Qᵗ`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistory {
    steps: Vec<Vec<usize>>,
}

impl SelectionHistory {
    pub fn steps(&self) -> &[Vec<usize>] {
        &self.steps
    }

    /// Records `q` and returns the sorted, deduplicated union over all steps.
    pub fn expand(&mut self, q: Vec<usize>) -> Vec<usize> {
        self.steps.push(q);
        self.union()
    }

    pub fn union(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.steps.iter().flatten().copied().collect();
        set.into_iter().collect()
    }
}

/// Selection threshold rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tau1Policy {
    /// `τ₁ = 1/n` with `n` the number of classes seen so far.
    InverseSeenClasses,
    Fixed(f64),
}

impl Tau1Policy {
    pub fn threshold(self, seen_classes: usize) -> f64 {
        match self {
            Self::InverseSeenClasses => 1.0 / seen_classes.max(1) as f64,
            Self::Fixed(t) => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GisConfig {
    /// When off, the space is the whole pool with curvatures fixed at their initial values.
    pub enabled: bool,
    pub tau1: Tau1Policy,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for GisConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau1: Tau1Policy::InverseSeenClasses,
            warmup_epochs: 1,
            warmup_lr: 0.01,
            epochs: 3,
            lr: 0.01,
            batch_size: 64,
        }
    }
}

impl GisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("gis.batch_size must be positive"));
        }
        for (name, v) in [("gis.lr", self.lr), ("gis.warmup_lr", self.warmup_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive and finite")));
            }
        }
        if let Tau1Policy::Fixed(t) = self.tau1 {
            if !t.is_finite() {
                return Err(Error::config("gis.tau1 must be finite"));
            }
        }
        Ok(())
    }
}

/// Selection record for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GisTrace {
    pub step: usize,
    pub weights: Vec<f64>,
    pub curvatures: Vec<f64>,
    pub selected: Vec<usize>,
    pub m: usize,
}

/// Trains classifier rows only, under the weight-sum loss with `a_j = 1/ξ`.
pub fn warmup_classifier<R: Rng>(
    state: &mut ModelState,
    inputs: &[&[f64]],
    labels: &[usize],
    cfg: &GisConfig,
    rng: &mut R,
) -> Result<()> {
    let xi = state.pool.len();
    let saved = state.params.get(state.weights).clone();
    state.params.set(state.weights, Tensor::row_vector(vec![1.0 / xi as f64; xi]));
    let saved_flags = trainability(state);
    state.params.train_only(&[state.classifier]);
    let out = descend(state, inputs, labels, cfg.warmup_epochs, cfg.warmup_lr, cfg.batch_size, rng);
    restore_trainability(state, saved_flags);
    state.params.set(state.weights, saved);
    out
}

/// Resets weights to `1/n` and descends the weight-sum loss over `(A, K)` with
/// backbone and classifier frozen.
pub fn gis_optimize<R: Rng>(
    state: &mut ModelState,
    inputs: &[&[f64]],
    labels: &[usize],
    cfg: &GisConfig,
    rng: &mut R,
) -> Result<()> {
    let n = state.num_classes();
    if n == 0 {
        return Err(Error::contract("search needs at least one class"));
    }
    let xi = state.pool.len();
    state.params.set(state.weights, Tensor::row_vector(vec![1.0 / n as f64; xi]));
    let saved_flags = trainability(state);
    state.params.train_only(&[state.weights, state.curvature]);
    let out = descend(state, inputs, labels, cfg.epochs, cfg.lr, cfg.batch_size, rng);
    restore_trainability(state, saved_flags);
    out
}

fn trainability(state: &ModelState) -> Vec<bool> {
    state.params.ids().map(|id| state.params.is_trainable(id)).collect()
}

fn restore_trainability(state: &mut ModelState, flags: Vec<bool>) {
    let ids: Vec<_> = state.params.ids().collect();
    for (id, f) in ids.into_iter().zip(flags) {
        state.params.set_trainable(id, f);
    }
}

fn descend<R: Rng>(
    state: &mut ModelState,
    inputs: &[&[f64]],
    labels: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<()> {
    for _ in 0..epochs {
        for batch in shuffled_batches(inputs.len(), batch_size, rng) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let loss = state.weight_sum_loss(&mut tape, &xs, &ys)?;
            if let Err(e) = tape.check() {
                return Err(name_factor(state, &xs, &ys).unwrap_or(e));
            }
            let grads = tape.backward(loss)?;
            state.params.sgd_step(&grads, lr);
            state.project_pool_params();
            if !state.params.get(state.weights).is_finite() || !state.params.get(state.curvature).is_finite() {
                return Err(name_factor(state, &xs, &ys).unwrap_or_else(|| {
                    Error::numerical("gis", "non-finite pool parameters after update")
                }));
            }
        }
    }
    Ok(())
}

/// Finds the first factor whose parameters or distances are non-finite.
fn name_factor(state: &ModelState, xs: &[&[f64]], ys: &[usize]) -> Option<Error> {
    for j in 0..state.pool.len() {
        let (a, k) = (state.weight(j), state.curvature_magnitude(j));
        let bad_params = !a.is_finite() || !k.is_finite();
        let bad_dist = || {
            let mut tape = Tape::new();
            let feats = state.features_graph(&mut tape, xs);
            state
                .class_sq_dists(&mut tape, feats, &[j], None)
                .map(|d| !tape.value(d).is_finite())
                .unwrap_or(true)
        };
        if bad_params || bad_dist() {
            return Some(Error::numerical(
                "gis",
                format!(
                    "factor {j} diverged (weight {a}, |K| {k}) on a batch of {} items",
                    ys.len()
                ),
            ));
        }
    }
    None
}

/// Snapshot of the pool parameters after a step's search.
pub fn trace(state: &ModelState, step: usize, selected: Vec<usize>) -> GisTrace {
    GisTrace {
        step,
        weights: state.params.get(state.weights).data().to_vec(),
        curvatures: (0..state.pool.len())
            .map(|j| state.pool.slots()[j].sign.factor() * state.curvature_magnitude(j))
            .collect(),
        selected,
        m: state.active.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_sizes() {
        assert_eq!(build_pool(512, &[16, 32, 64, 128, 256], SignPolicy::Split).unwrap().len(), 62);
        assert_eq!(build_pool(32, &[4, 8, 16], SignPolicy::Split).unwrap().len(), 14);
        let p = build_pool(16, &[16], SignPolicy::Split).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p.slots()[0].slice_start, p.slots()[0].slice_end), (1, 16));
    }

    #[test]
    fn pool_rejects_non_dividing_size() {
        assert!(matches!(build_pool(32, &[5], SignPolicy::Split), Err(Error::Config(_))));
        assert!(build_pool(32, &[], SignPolicy::Split).is_err());
    }

    #[test]
    fn split_policy_halves_signs() {
        let p = build_pool(32, &[4, 8, 16], SignPolicy::Split).unwrap();
        let neg = p.slots().iter().filter(|s| s.sign == CurvatureSign::Negative).count();
        assert_eq!(neg, 7);
        assert!(p.slots()[..7].iter().all(|s| s.sign == CurvatureSign::Negative));
        assert!(p.slots()[7..].iter().all(|s| s.sign == CurvatureSign::Positive));
        assert_eq!((p.slots()[8].slice_start, p.slots()[8].slice_end), (1, 8));
    }

    #[test]
    fn select_threshold_rule() {
        assert_eq!(select(&[0.3, 0.05], 0.1, false), vec![0]);
        assert!(select(&[0.05, 0.1], 0.1, false).is_empty());
        assert!(select(&[0.1, 0.1], 0.1, false).is_empty());
        assert_eq!(select(&[0.05, 0.08, 0.02], 0.1, true), vec![1]);
    }

    #[test]
    fn expand_is_union() {
        let mut h = SelectionHistory::default();
        assert_eq!(h.expand(vec![3, 7]), vec![3, 7]);
        assert_eq!(h.expand(vec![7, 9]), vec![3, 7, 9]);
        assert_eq!(h.expand(vec![]), vec![3, 7, 9]);
        assert_eq!(h.steps().len(), 3);
    }
}
