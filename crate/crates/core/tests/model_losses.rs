//! Loss-level properties checked through the public model API.

use geocl::autodiff::{Tape, Tensor};
use geocl::gis::{build_pool, SignPolicy};
use geocl::model::{neighbor_robustness_loss, step_loss, step_loss_plain, ModelState, StepBatch, StructureLossConfig, StructureReference};
use geocl::product;
use geocl::selfcheck::grad_case;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

#[test]
fn tape_and_plain_step_losses_agree() {
    for i in 0..6 {
        let case = grad_case(i, 3).unwrap();
        let reference = case.reference().unwrap();
        let (xs, bx) = (rows(&case.inputs), rows(&case.buffer));
        let all: Vec<usize> = (0..bx.len()).collect();
        let batch = StepBatch {
            inputs: &xs,
            labels: &case.labels,
            buffer_inputs: &bx,
            buffer_batch: &all,
        };
        for cfg in [
            StructureLossConfig::default(),
            StructureLossConfig {
                repulsion_cap_factor: Some(0.5),
                local_over_tau2: false,
                ..StructureLossConfig::default()
            },
        ] {
            let mut tape = Tape::new();
            let loss = step_loss(&mut tape, &case.state, &batch, Some(&reference), &cfg).unwrap();
            let (total, ce, global, local) = step_loss_plain(&case.state, &batch, Some(&reference), &cfg).unwrap();
            assert!((tape.scalar(loss.total) - total).abs() <= 1e-10, "case {i}");
            assert!((tape.scalar(loss.ce) - ce).abs() <= 1e-10);
            assert!((tape.scalar(loss.global.unwrap()) - global).abs() <= 1e-10);
            assert!((tape.scalar(loss.local.unwrap()) - local).abs() <= 1e-10);
        }
    }
}

#[test]
fn weight_sum_loss_with_unit_weights_is_cross_entropy_on_the_pool() {
    for i in 0..6 {
        let mut state = grad_case(i, 9).unwrap().state;
        let xi = state.pool.len();
        state.params.set(state.weights, Tensor::row_vector(vec![1.0; xi]));
        state.active = state.pool_indices();
        let case = grad_case(i, 9).unwrap();
        let xs = rows(&case.inputs);
        let mut tape = Tape::new();
        let a = state.weight_sum_loss(&mut tape, &xs, &case.labels).unwrap();
        let b = state.ce_loss(&mut tape, &xs, &case.labels).unwrap();
        assert!((tape.scalar(a) - tape.scalar(b)).abs() <= 1e-12);
    }
}

#[test]
fn zero_weights_give_uniform_probabilities() {
    let case = grad_case(0, 1).unwrap();
    let mut state = case.state;
    let xi = state.pool.len();
    state.params.set(state.weights, Tensor::row_vector(vec![0.0; xi]));
    let mut tape = Tape::new();
    let loss = state.weight_sum_loss(&mut tape, &rows(&case.inputs), &case.labels).unwrap();
    assert!((tape.scalar(loss) - (state.num_classes() as f64).ln()).abs() <= 1e-12);
}

#[test]
fn non_discriminating_factor_has_zero_weight_gradient() {
    for i in 0..6 {
        let case = grad_case(i, 5).unwrap();
        let mut state = case.state;
        // Slots 0 and 1 tile the feature; slot 2 spans both.
        let j = i % 2;
        let range = state.pool.slots()[j].range();
        let w = state.params.get_mut(state.classifier);
        let first: Vec<f64> = w.row(0)[range.clone()].to_vec();
        for l in 1..w.rows() {
            w.row_mut(l)[range.clone()].copy_from_slice(&first);
        }
        state.params.train_only(&[state.weights]);
        let mut tape = Tape::new();
        let loss = state.weight_sum_loss(&mut tape, &rows(&case.inputs), &case.labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(state.weights).unwrap().data().to_vec();
        assert!(g[j].abs() <= 1e-12, "factor {j}: {}", g[j]);
        assert!(g.iter().any(|v| v.abs() > 1e-6), "other factors still discriminate");
    }
}

fn pair_model(seed: u64, policy: SignPolicy) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = build_pool(4, &[2, 4], policy).unwrap();
    let mut state = ModelState::new(&[3, 4], 0.5, pool, &mut rng).unwrap();
    state.active = state.pool_indices();
    state
}

fn pair_sq_dist(state: &ModelState, a: &[f64], b: &[f64]) -> f64 {
    let space = state.space().unwrap();
    let lift = |x: &[f64]| product::lift(&state.backbone.features(&state.params, x).unwrap(), &space).unwrap();
    product::product_sq_distance(&lift(a), &lift(b)).unwrap()
}

#[test]
fn neighbor_loss_attracts_positive_and_repels_negative_pairs() {
    let (a, b) = ([0.3, -0.2, 0.5], [-0.4, 0.1, 0.2]);
    for (seed, policy) in [(0, SignPolicy::Split), (1, SignPolicy::Negative), (2, SignPolicy::Positive)] {
        for e in [1i8, -1] {
            let mut state = pair_model(seed, policy);
            let reference = StructureReference {
                tau2: 1.0,
                cosines: Tensor::zeros(2, 2),
                affinity: vec![vec![0, e], vec![e, 0]],
                sq_dists: Tensor::zeros(2, 2),
            };
            let before = pair_sq_dist(&state, &a, &b);
            let mut tape = Tape::new();
            let feats = state.features_graph(&mut tape, &[&a, &b]);
            let curv = tape.param(&state.params, state.curvature);
            let lifted = state.lift_graph(&mut tape, feats, curv, &state.active);
            let loss = neighbor_robustness_loss(&mut tape, &state, &lifted, curv, &[0, 1], &reference, None);
            assert!((tape.scalar(loss) - e as f64 * before).abs() <= 1e-12);
            let grads = tape.backward(loss).unwrap();
            state.params.sgd_step(&grads, 1e-3);
            let after = pair_sq_dist(&state, &a, &b);
            if e > 0 {
                assert!(after < before, "attraction: {before} -> {after}");
            } else {
                assert!(after > before, "repulsion: {before} -> {after}");
            }
        }
    }
}
