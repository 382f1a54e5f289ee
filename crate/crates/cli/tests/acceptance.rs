//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::time::Instant;

use geocl::autodiff::{Tape, Tensor};
use geocl::config::{DataSource, ExperimentConfig};
use geocl::gis::{build_pool, SignPolicy};
use geocl::harness::trainer::{init_state, run_step, TrainLog};
use geocl::harness::SynthSpec;
use geocl::model::{angular_reg_loss, ModelState, StructureReference, Tau2Policy};
use geocl::selfcheck::{geometry_checks, gradient_checks, Check};
use geocl_cli::{execute, load_stream, mean_std};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn checks_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

fn describe(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| format!("{} {:.2e} ≤ {:.0e}", c.name, c.value, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ")
}

fn geometry() -> (Outcome, Outcome) {
    let start = Instant::now();
    let checks = geometry_checks(10_000, 0).expect("geometry suite runs");
    let secs = start.elapsed().as_secs_f64();
    let (suite, oracles) = checks.split_at(3);
    let first = Outcome {
        id: 1,
        title: "geometry suite",
        passed: checks_pass(suite) && secs < 10.0,
        detail: format!("{}; {secs:.2}s < 10s", describe(suite)),
    };
    let second = Outcome {
        id: 2,
        title: "closed-form oracles",
        passed: checks_pass(oracles),
        detail: describe(oracles),
    };
    (first, second)
}

fn pool_arithmetic() -> Outcome {
    let large = build_pool(512, &[16, 32, 64, 128, 256], SignPolicy::Split).expect("pool").len();
    let small = build_pool(32, &[4, 8, 16], SignPolicy::Split).expect("pool").len();
    Outcome {
        id: 3,
        title: "pool arithmetic",
        passed: large == 62 && small == 14,
        detail: format!("512 → {large} factors (want 62), 32 → {small} (want 14)"),
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let checks = gradient_checks(100, 0, None, 1e-4).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    Outcome {
        id: 4,
        title: "gradient correctness",
        passed: checks_pass(&checks) && secs < 60.0,
        detail: format!("{} losses × 100 trials, worst {worst:.2e} ≤ 1e-4; {secs:.2}s < 60s", checks.len()),
    }
}

/// Small mixed model whose feature slices stay inside every factor's injectivity radius.
fn modest_model(seed: u64) -> (ModelState, ModelState, Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = build_pool(8, &[2, 4, 8], SignPolicy::Split).expect("pool");
    let mut state = ModelState::new(&[6, 8, 8], 0.05, pool, &mut rng).expect("model");
    state.active = state.pool_indices();
    let mags: Vec<f64> = (0..state.pool.len()).map(|_| rng.random_range(0.5..2.0)).collect();
    state.params.set(state.curvature, Tensor::row_vector(mags));
    let mut snapshot = state.clone();
    for id in snapshot.backbone.param_ids() {
        let mut t = snapshot.params.get(id).clone();
        t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng.random_range(-1.0..1.0));
        snapshot.params.set(id, t);
    }
    let inputs = (0..12).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let labels = (0..12).map(|i| i % 3).collect();
    (state, snapshot, inputs, labels)
}

fn global_loss(state: &ModelState, rows: &[&[f64]], reference: &StructureReference) -> f64 {
    let mut tape = Tape::new();
    let feats = state.features_graph(&mut tape, rows);
    let curv = tape.param(&state.params, state.curvature);
    let lifted = state.lift_graph(&mut tape, feats, curv, &state.active);
    let batch: Vec<usize> = (0..rows.len()).collect();
    let loss = angular_reg_loss(&mut tape, state, &lifted, curv, &batch, reference).loss;
    tape.scalar(loss)
}

fn curvature_invariance() -> Outcome {
    let mut worst = 0.0f64;
    let mut smallest = f64::INFINITY;
    for seed in 0..20 {
        let (state, snapshot, inputs, labels) = modest_model(seed);
        let rows: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let reference = StructureReference::from_snapshot(&snapshot, &rows, &labels, Tau2Policy::MeanSameClass)
            .expect("reference");
        let base = global_loss(&state, &rows, &reference);
        smallest = smallest.min(base);
        for j in 0..state.pool.len() {
            let mut scaled = state.clone();
            scaled.params.get_mut(scaled.curvature).data_mut()[j] *= 10.0;
            worst = worst.max((global_loss(&scaled, &rows, &reference) - base).abs());
        }
    }
    Outcome {
        id: 5,
        title: "angular-loss curvature invariance",
        passed: worst <= 1e-9 && smallest > 0.0,
        detail: format!("max |ΔL_global| {worst:.2e} ≤ 1e-9 over 20 models × 14 factors (L_global ≥ {smallest:.2e})"),
    }
}

struct Variant {
    final_acc: Vec<f64>,
    forgetting: Vec<f64>,
    slowest: f64,
}

fn run_variant(edit: impl Fn(&mut ExperimentConfig)) -> Variant {
    let mut v = Variant {
        final_acc: Vec::new(),
        forgetting: Vec::new(),
        slowest: 0.0,
    };
    for seed in SEEDS {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        edit(&mut cfg);
        let (_, report) = execute(&cfg, None, None).expect("reference run completes");
        v.final_acc.push(report.summary.final_accuracy);
        v.forgetting.push(report.summary.average_forgetting.expect("multi-step stream"));
        v.slowest = v.slowest.max(report.wall_clock_seconds);
    }
    v
}

fn no_structure(cfg: &mut ExperimentConfig) {
    cfg.structure.lambda_global = 0.0;
    cfg.structure.lambda_local = 0.0;
}

fn ablation() -> (Outcome, Outcome) {
    let ours = run_variant(|_| {});
    let euclidean = run_variant(|c| {
        c.pool.sizes = vec![c.model.feature_dim];
        c.pool.signs = SignPolicy::Flat;
        c.gis.enabled = false;
        no_structure(c);
    });
    let gis_only = run_variant(no_structure);
    let structure_only = run_variant(|c| c.gis.enabled = false);
    let m = |v: &Variant| mean_std(&v.final_acc).0;
    let slowest = [&ours, &euclidean, &gis_only, &structure_only].iter().map(|v| v.slowest).fold(0.0, f64::max);
    let (o, e, g, s) = (m(&ours), m(&euclidean), m(&gis_only), m(&structure_only));
    let sixth = Outcome {
        id: 6,
        title: "desk-scale ablation",
        passed: o >= e + 0.02 && g >= e && s >= e && slowest <= 300.0,
        detail: format!(
            "final acc over 5 seeds: ours {:.2}% vs euclidean {:.2}% + 2; gis-only {:.2}%; global+local {:.2}%; slowest run {slowest:.1}s ≤ 300s",
            100.0 * o,
            100.0 * e,
            100.0 * g,
            100.0 * s
        ),
    };
    let (af_on, af_off) = (mean_std(&ours.forgetting).0, mean_std(&gis_only.forgetting).0);
    let seventh = Outcome {
        id: 7,
        title: "forgetting direction",
        passed: af_on <= af_off,
        detail: format!("mean AF λ=1 {:.2}% ≤ λ=0 {:.2}%", 100.0 * af_on, 100.0 * af_off),
    };
    (sixth, seventh)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = ExperimentConfig {
        seed: 11,
        ..ExperimentConfig::default()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    execute(&cfg, Some(&a), None).expect("first run");
    execute(&cfg, Some(&b), None).expect("second run");
    let read = |p: &std::path::Path| std::fs::read(p.join("metrics.csv")).expect("metrics written");
    let (x, y) = (read(&a), read(&b));
    Outcome {
        id: 8,
        title: "determinism",
        passed: !x.is_empty() && x == y,
        detail: format!("metrics.csv {} bytes, identical: {}", x.len(), x == y),
    }
}

/// Independent trainer: `tanh` MLP features, logits `−4‖f − w_l‖²`, mean
/// cross-entropy, plain SGD. Gradients are derived by hand.
struct Oracle {
    layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
    w: Vec<Vec<f64>>,
}

impl Oracle {
    fn from_state(state: &ModelState) -> Self {
        let p = &state.params;
        let depth = state.backbone.sizes().len() - 1;
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let layers = (0..depth)
            .map(|l| {
                let w = p.get(p.id(&format!("backbone.{l}.weight")).expect("weight"));
                let b = p.get(p.id(&format!("backbone.{l}.bias")).expect("bias"));
                (rows(w), b.data().to_vec())
            })
            .collect();
        Self {
            layers,
            w: rows(p.get(p.id("classifier").expect("classifier"))),
        }
    }

    /// Loss on the batch, then one SGD update.
    fn step(&mut self, xs: &[&[f64]], ys: &[usize], lr: f64) -> f64 {
        let n = xs.len() as f64;
        let depth = self.layers.len();
        let mut g_layers: Vec<(Vec<Vec<f64>>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|(w, b)| (vec![vec![0.0; w[0].len()]; w.len()], vec![0.0; b.len()]))
            .collect();
        let mut g_w = vec![vec![0.0; self.w[0].len()]; self.w.len()];
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            // Forward, keeping every layer's input.
            let mut acts = vec![x.to_vec()];
            for (l, (w, b)) in self.layers.iter().enumerate() {
                let h = acts.last().expect("input");
                let mut z: Vec<f64> = w.iter().zip(b).map(|(row, bi)| bi + row.iter().zip(h).map(|(a, v)| a * v).sum::<f64>()).collect();
                if l + 1 < depth {
                    z.iter_mut().for_each(|v| *v = v.tanh());
                }
                acts.push(z);
            }
            let f = acts.last().expect("features").clone();
            let logits: Vec<f64> = self.w.iter().map(|wl| -4.0 * wl.iter().zip(&f).map(|(a, b)| (b - a) * (b - a)).sum::<f64>()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            loss += z.ln() + mx - logits[y];
            // dL/dlogit_l = (p_l − [l = y]) / n; dlogit_l/df = −8(f − w_l).
            let mut g = vec![0.0; f.len()];
            for (l, wl) in self.w.iter().enumerate() {
                let d = ((logits[l] - mx).exp() / z - if l == y { 1.0 } else { 0.0 }) / n;
                for k in 0..f.len() {
                    g[k] += -8.0 * d * (f[k] - wl[k]);
                    g_w[l][k] += 8.0 * d * (f[k] - wl[k]);
                }
            }
            for l in (0..depth).rev() {
                if l + 1 < depth {
                    for (gk, a) in g.iter_mut().zip(&acts[l + 1]) {
                        *gk *= 1.0 - a * a;
                    }
                }
                let input = &acts[l];
                let (gw, gb) = &mut g_layers[l];
                for (o, go) in g.iter().enumerate() {
                    gb[o] += go;
                    for (i, v) in input.iter().enumerate() {
                        gw[o][i] += go * v;
                    }
                }
                let w = &self.layers[l].0;
                g = (0..input.len()).map(|i| g.iter().enumerate().map(|(o, go)| go * w[o][i]).sum()).collect();
            }
        }
        for ((w, b), (gw, gb)) in self.layers.iter_mut().zip(&g_layers) {
            for (row, grow) in w.iter_mut().zip(gw) {
                row.iter_mut().zip(grow).for_each(|(a, g)| *a -= lr * g);
            }
            b.iter_mut().zip(gb).for_each(|(a, g)| *a -= lr * g);
        }
        for (row, grow) in self.w.iter_mut().zip(&g_w) {
            row.iter_mut().zip(grow).for_each(|(a, g)| *a -= lr * g);
        }
        loss / n
    }
}

fn reduction() -> Outcome {
    let mut cfg = ExperimentConfig {
        seed: 5,
        data: DataSource::Synthetic(SynthSpec {
            classes: 4,
            steps: 1,
            samples_per_class: 60,
            ..SynthSpec::default()
        }),
        ..ExperimentConfig::default()
    };
    cfg.pool.sizes = vec![cfg.model.feature_dim];
    cfg.pool.signs = SignPolicy::Flat;
    cfg.train.epochs = 5;
    no_structure(&mut cfg);
    let stream = load_stream(&cfg).expect("stream");
    let mut state = init_state(&cfg, stream.input_dim()).expect("state");
    let mut log = TrainLog::default();
    run_step(&cfg, &stream, &mut state, Some(&mut log)).expect("step");
    let mut oracle = Oracle::from_state(log.initial.as_ref().expect("initial model logged"));
    let mut worst = 0.0f64;
    for (batch, &loss) in log.batches.iter().zip(&log.losses) {
        let xs: Vec<&[f64]> = batch.iter().map(|&i| log.train_set[i].input.as_slice()).collect();
        let ys: Vec<usize> = batch.iter().map(|&i| log.train_set[i].label).collect();
        worst = worst.max((oracle.step(&xs, &ys, cfg.train.lr) - loss).abs());
    }
    Outcome {
        id: 9,
        title: "reduction to Euclidean softmax",
        passed: !log.losses.is_empty() && worst <= 1e-6,
        detail: format!("max |Δloss| {worst:.2e} ≤ 1e-6 over {} iterations", log.losses.len()),
    }
}

fn main() {
    let (first, second) = geometry();
    let (sixth, seventh) = ablation();
    let outcomes = [
        first,
        second,
        pool_arithmetic(),
        gradients(),
        curvature_invariance(),
        sixth,
        seventh,
        determinism(),
        reduction(),
    ];
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag}  criterion {} {}: {}", o.id, o.title, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
