//! Sampled property suites: geometry identities, gradient checks for every
//! training loss, and axioms of the continual-learning metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{Fault, GradCheck, ParamSet, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{self, CcsPoint, Curvature, CurvatureSign, TangentVec};
use crate::gis::{build_pool, SignPolicy};
use crate::harness::metrics::MetricsRecord;
use crate::model::{
    angular_reg_loss, neighbor_robustness_loss, step_loss, ModelState, StepBatch, StructureLossConfig,
    StructureReference, Tau2Policy,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

fn random_vec<R: Rng>(dim: usize, norm: f64, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.into_iter().map(|x| x * norm / n).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-300);
    diff / scale
}

const CURVATURES: [f64; 6] = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
const DIMS: [usize; 4] = [1, 2, 8, 16];

/// Random point whose geodesic distance from the origin is at most `reach / √|K|`.
fn random_point<R: Rng>(dim: usize, k: Curvature, reach: f64, rng: &mut R) -> CcsPoint {
    let s = k.magnitude().sqrt();
    let dist = rng.random::<f64>() * reach / s;
    let q = TangentVec::at_origin(random_vec(dim, dist / 2.0, rng), k).expect("finite tangent");
    geometry::exp_map(&q).expect("bounded reach stays in domain")
}

/// Exp/log roundtrip, symmetry, triangle inequality and one-dimensional closed forms.
pub fn geometry_checks(draws: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut roundtrip, mut symmetry, mut triangle) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..draws {
        let k = Curvature::new(CURVATURES[i % CURVATURES.len()])?;
        let dim = DIMS[(i / CURVATURES.len()) % DIMS.len()];
        let s = k.magnitude().sqrt();
        let u = random_point(dim, k, 2.0, &mut rng);
        let lambda = 2.0 / (1.0 + k.value() * u.coords().iter().map(|c| c * c).sum::<f64>());
        let len = (0.01 + 0.99 * rng.random::<f64>()) * 2.5 / s;
        let q = TangentVec::new(u.clone(), random_vec(dim, len / lambda, &mut rng))?;
        let back = geometry::log_map(&u, &geometry::exp_map(&q)?)?;
        roundtrip = roundtrip.max(rel(back.coords(), q.coords()));

        let x = random_point(dim, k, 2.5, &mut rng);
        let y = random_point(dim, k, 2.5, &mut rng);
        let z = random_point(dim, k, 2.5, &mut rng);
        let dxy = geometry::ccs_distance(&x, &y)?;
        symmetry = symmetry.max((dxy - geometry::ccs_distance(&y, &x)?).abs());
        let slack = geometry::ccs_distance(&x, &z)? - dxy - geometry::ccs_distance(&y, &z)?;
        triangle = triangle.max(slack);
    }

    let hyp = Curvature::new(-1.0)?;
    let (mut gyro, mut additive) = (0.0f64, 0.0f64);
    for _ in 0..draws.min(2000) {
        let a: f64 = rng.random_range(-0.95..0.95);
        let b: f64 = rng.random_range(-0.95..0.95);
        let pa = CcsPoint::new(vec![a], hyp)?;
        let pb = CcsPoint::new(vec![b], hyp)?;
        let sum = geometry::mobius_add(&pa, &pb)?;
        gyro = gyro.max((sum.coords()[0] - (a.atanh() + b.atanh()).tanh()).abs());
        let (a, b) = (a.abs(), b.abs());
        let (pa, pb) = (CcsPoint::new(vec![a], hyp)?, CcsPoint::new(vec![b], hyp)?);
        let o = CcsPoint::origin(1, hyp);
        let lhs = geometry::ccs_distance(&o, &pa)? + geometry::ccs_distance(&o, &pb)?;
        let rhs = geometry::ccs_distance(&o, &geometry::mobius_add(&pa, &pb)?)?;
        additive = additive.max((lhs - rhs).abs() / rhs.max(1.0));
    }

    let mut limit = 0.0f64;
    for i in 0..draws.min(2000) {
        let k = Curvature::new(if i % 2 == 0 { -1e-4 } else { 1e-4 })?;
        let dim = DIMS[i % DIMS.len()];
        let x = random_vec(dim, rng.random::<f64>(), &mut rng);
        let y = random_vec(dim, rng.random::<f64>(), &mut rng);
        let e = 2.0 * x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let d = geometry::ccs_distance(&CcsPoint::new(x, k)?, &CcsPoint::new(y, k)?)?;
        if e > 0.0 {
            limit = limit.max((d - e).abs() / (e / 2.0));
        }
    }

    Ok(vec![
        Check::at_most("exp/log roundtrip (relative)", roundtrip, 1e-6),
        Check::at_most("distance symmetry", symmetry, 1e-9),
        Check::at_most("triangle inequality violation", triangle, 1e-7),
        Check::at_most("1-D gyro-addition vs tanh(artanh+artanh)", gyro, 1e-10),
        Check::at_most("1-D geodesic additivity", additive, 1e-9),
        Check::at_most("Euclidean limit |ψ − 2‖x−y‖| / ‖x−y‖", limit, 1e-3),
    ])
}

/// One random gradient-check configuration.
pub struct GradCase {
    pub state: ModelState,
    pub snapshot: ModelState,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub buffer: Vec<Vec<f64>>,
    pub buffer_labels: Vec<usize>,
}

/// Small model over a 3-slot pool; `i` cycles through mixed, all-negative and
/// all-positive sign policies.
pub fn grad_case(i: usize, seed: u64) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
    let policy = [SignPolicy::Split, SignPolicy::Negative, SignPolicy::Positive][i % 3];
    let pool = build_pool(4, &[2, 4], policy)?;
    let mut state = ModelState::new(&[3, 5, 4], 0.4, pool, &mut rng)?;
    state.add_classes(3, 0.3, &mut rng);
    state.active = state.pool_indices();
    let mags: Vec<f64> = (0..state.pool.len()).map(|_| rng.random_range(0.5..2.0)).collect();
    state.params.set(state.curvature, Tensor::row_vector(mags));
    let weights: Vec<f64> = (0..state.pool.len()).map(|_| rng.random_range(0.2..1.5)).collect();
    state.params.set(state.weights, Tensor::row_vector(weights));
    let mut snapshot = state.clone();
    for id in snapshot.backbone.param_ids() {
        let mut t = snapshot.params.get(id).clone();
        t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.random_range(-1.0..1.0));
        snapshot.params.set(id, t);
    }
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    };
    let inputs = draw(4);
    let buffer = draw(6);
    Ok(GradCase {
        state,
        snapshot,
        inputs,
        labels: vec![0, 1, 2, 1],
        buffer,
        buffer_labels: vec![0, 0, 1, 1, 2, 2],
    })
}

impl GradCase {
    fn with_trainable(mut self, f: impl Fn(&ModelState) -> Vec<crate::autodiff::ParamId>) -> Self {
        let ids = f(&self.state);
        self.state.params.train_only(&ids);
        self
    }

    fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    /// Snapshot reference with τ₂ at the median pairwise distance so both signs of `e` occur.
    pub fn reference(&self) -> Result<StructureReference> {
        let rows = Self::rows(&self.buffer);
        let probe = StructureReference::from_snapshot(&self.snapshot, &rows, &self.buffer_labels, Tau2Policy::Fixed(0.0))?;
        let n = rows.len();
        let mut d: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| probe.sq_dists.get(i, j)).collect();
        d.sort_by(f64::total_cmp);
        StructureReference::from_snapshot(&self.snapshot, &rows, &self.buffer_labels, Tau2Policy::Fixed(d[d.len() / 2]))
    }
}

/// Names of the losses covered by [`gradient_checks`].
pub const GRADIENT_LOSSES: [&str; 7] = [
    "squared distance of exp map wrt tangent",
    "distance-softmax cross-entropy",
    "weight-sum loss wrt (weights, curvatures)",
    "Huber",
    "angular regularization",
    "neighbor robustness",
    "total loss",
];

fn worst_for<F>(trials: usize, fault: Option<Fault>, setup: F) -> Result<f64>
where
    F: Fn(usize) -> Result<(ParamSet, Box<dyn Fn(&mut Tape, &ParamSet) -> Var>)>,
{
    let check = GradCheck { fault, ..GradCheck::default() };
    let mut worst: f64 = 0.0;
    for i in 0..trials {
        let (params, build) = setup(i)?;
        worst = worst.max(check.at(&params, &build)?);
    }
    Ok(worst)
}

/// Worst gradient-check relative error per loss over `trials` random draws.
pub fn gradient_checks(trials: usize, seed: u64, fault: Option<Fault>, tolerance: f64) -> Result<Vec<Check>> {
    let trials = trials.max(1);
    let mut out = Vec::new();
    let mut push = |name: &str, v: f64| out.push(Check::at_most(name, v, tolerance));

    push(
        GRADIENT_LOSSES[0],
        worst_for(trials, fault, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37));
            let sign = [CurvatureSign::Negative, CurvatureSign::Positive][i % 2];
            let mag: f64 = rng.random_range(0.5..2.0);
            let dim = 1 + i % 4;
            let mut params = ParamSet::new();
            let v = params.add("v", Tensor::row_vector(random_vec(dim, rng.random_range(0.1..0.9) / mag.sqrt(), &mut rng)), true);
            let w = Tensor::row_vector(random_vec(dim, rng.random_range(0.1..0.7) / mag.sqrt(), &mut rng));
            let build = move |t: &mut Tape, p: &ParamSet| {
                let k = t.scalar_constant(mag);
                let x = t.param(p, v);
                let x = t.exp0(x, k, sign);
                let w = t.constant(w.clone());
                let d = t.pair_sq_dist(x, w, k, sign);
                t.sum(d)
            };
            Ok((params, Box::new(build) as Box<dyn Fn(&mut Tape, &ParamSet) -> Var>))
        })?,
    );

    push(
        GRADIENT_LOSSES[1],
        worst_for(trials, fault, |i| {
            let case = grad_case(i, seed)?.with_trainable(|s| {
                let mut ids = s.backbone.param_ids();
                ids.extend([s.classifier, s.curvature]);
                ids
            });
            let params = case.state.params.clone();
            let build = move |t: &mut Tape, p: &ParamSet| {
                let mut s = case.state.clone();
                s.params = p.clone();
                s.ce_loss(t, &GradCase::rows(&case.inputs), &case.labels).expect("valid labels")
            };
            Ok((params, Box::new(build) as Box<dyn Fn(&mut Tape, &ParamSet) -> Var>))
        })?,
    );

    push(
        GRADIENT_LOSSES[2],
        worst_for(trials, fault, |i| {
            let case = grad_case(i, seed)?.with_trainable(|s| vec![s.weights, s.curvature]);
            let params = case.state.params.clone();
            let build = move |t: &mut Tape, p: &ParamSet| {
                let mut s = case.state.clone();
                s.params = p.clone();
                s.weight_sum_loss(t, &GradCase::rows(&case.inputs), &case.labels).expect("valid labels")
            };
            Ok((params, Box::new(build) as Box<dyn Fn(&mut Tape, &ParamSet) -> Var>))
        })?,
    );

    push(
        GRADIENT_LOSSES[3],
        worst_for(trials, fault, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0B ^ i as u64);
            let mut params = ParamSet::new();
            let a = params.add("a", Tensor::row_vector((0..6).map(|_| rng.random_range(-3.0..3.0)).collect()), true);
            let b = Tensor::row_vector((0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
            let build = move |t: &mut Tape, p: &ParamSet| {
                let x = t.param(p, a);
                let y = t.constant(b.clone());
                let h = t.huber(x, y);
                t.sum(h)
            };
            Ok((params, Box::new(build) as Box<dyn Fn(&mut Tape, &ParamSet) -> Var>))
        })?,
    );

    push(
        GRADIENT_LOSSES[4],
        worst_for(trials, fault, |i| {
            let case = grad_case(i, seed)?.with_trainable(|s| {
                let mut ids = s.backbone.param_ids();
                ids.push(s.classifier);
                ids
            });
            let reference = case.reference()?;
            let params = case.state.params.clone();
            let build = move |t: &mut Tape, p: &ParamSet| {
                let mut s = case.state.clone();
                s.params = p.clone();
                let feats = s.features_graph(t, &GradCase::rows(&case.buffer));
                let curv = t.param(&s.params, s.curvature);
                let lifted = s.lift_graph(t, feats, curv, &s.active);
                let batch: Vec<usize> = (0..case.buffer.len()).collect();
                angular_reg_loss(t, &s, &lifted, curv, &batch, &reference).loss
            };
            Ok((params, Box::new(build) as Box<dyn Fn(&mut Tape, &ParamSet) -> Var>))
        })?,
    );

    push(
        GRADIENT_LOSSES[5],
        worst_for(trials, fault, |i| {
            let case = grad_case(i, seed)?.with_trainable(|s| {
                let mut ids = s.backbone.param_ids();
                ids.extend([s.classifier, s.curvature]);
                ids
            });
            let reference = case.reference()?;
            let params = case.state.params.clone();
            let cap = (i % 2 == 1).then_some(4.0 * reference.tau2);
            let build = move |t: &mut Tape, p: &ParamSet| {
                let mut s = case.state.clone();
                s.params = p.clone();
                let feats = s.features_graph(t, &GradCase::rows(&case.buffer));
                let curv = t.param(&s.params, s.curvature);
                let lifted = s.lift_graph(t, feats, curv, &s.active);
                let batch: Vec<usize> = (0..case.buffer.len()).collect();
                neighbor_robustness_loss(t, &s, &lifted, curv, &batch, &reference, cap)
            };
            Ok((params, Box::new(build) as Box<dyn Fn(&mut Tape, &ParamSet) -> Var>))
        })?,
    );

    push(
        GRADIENT_LOSSES[6],
        worst_for(trials, fault, |i| {
            let case = grad_case(i, seed)?.with_trainable(|s| {
                let mut ids = s.backbone.param_ids();
                ids.push(s.classifier);
                ids
            });
            let reference = case.reference()?;
            let params = case.state.params.clone();
            let build = move |t: &mut Tape, p: &ParamSet| {
                let mut s = case.state.clone();
                s.params = p.clone();
                let buffer_batch: Vec<usize> = (0..case.buffer.len()).collect();
                let batch = StepBatch {
                    inputs: &GradCase::rows(&case.inputs),
                    labels: &case.labels,
                    buffer_inputs: &GradCase::rows(&case.buffer),
                    buffer_batch: &buffer_batch,
                };
                step_loss(t, &s, &batch, Some(&reference), &StructureLossConfig::default())
                    .expect("valid batch")
                    .total
            };
            Ok((params, Box::new(build) as Box<dyn Fn(&mut Tape, &ParamSet) -> Var>))
        })?,
    );
    Ok(out)
}

/// Range and identity properties of the summary metrics on random accuracy matrices.
pub fn metric_checks(draws: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut range_violation, mut flat_forgetting, mut peak_identity) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..draws {
        let steps = rng.random_range(1..6usize);
        let mut m = MetricsRecord::default();
        let mut flat = MetricsRecord::default();
        let level = rng.random_range(0..=20usize);
        for t in 0..steps {
            let row: Vec<(usize, usize)> = (0..=t).map(|_| (rng.random_range(0..=20usize), 20)).collect();
            m.push_step(&row)?;
            flat.push_step(&vec![(level, 20); t + 1])?;
        }
        let s = m.summary()?;
        for v in [s.final_accuracy, s.average_accuracy, s.average_incremental_accuracy] {
            range_violation = range_violation.max(-v).max(v - 1.0);
        }
        if let Some(af) = s.average_forgetting {
            range_violation = range_violation.max(-1.0 - af).max(af - 1.0);
            // With the final row set to each column's earlier peak, forgetting vanishes.
            let last = steps - 1;
            for j in 0..last {
                m.acc[last][j] = (j..last).map(|t| m.acc[t][j]).fold(f64::NEG_INFINITY, f64::max);
            }
            peak_identity = peak_identity.max(m.summary()?.average_forgetting.unwrap_or(0.0).abs());
        }
        if let Some(af) = flat.summary()?.average_forgetting {
            flat_forgetting = flat_forgetting.max(af.abs());
        }
    }
    Ok(vec![
        Check::at_most("metrics stay in range", range_violation, 0.0),
        Check::at_most("constant accuracy has zero forgetting", flat_forgetting, 1e-12),
        Check::at_most("peak-level final row has zero forgetting", peak_identity, 0.0),
    ])
}
