//! End-to-end behaviour of the training loop on small synthetic streams.

use geocl::checkpoint::Checkpoint;
use geocl::config::{DataSource, ExperimentConfig};
use geocl::harness::{generate_synthetic_stream, init_state, run, run_step, Stream, SynthSpec};

fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        data: DataSource::Synthetic(SynthSpec {
            classes: 6,
            steps: 3,
            samples_per_class: 40,
            ..SynthSpec::default()
        }),
        ..ExperimentConfig::default()
    };
    cfg.model.hidden = vec![16];
    cfg.model.feature_dim = 8;
    cfg.pool.sizes = vec![2, 4];
    cfg.train.epochs = 4;
    cfg.train.pair_batch = 16;
    cfg
}

fn stream_for(cfg: &ExperimentConfig) -> Stream {
    let DataSource::Synthetic(spec) = &cfg.data else { unreachable!() };
    generate_synthetic_stream(spec, cfg.seed).unwrap()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = small_config(4);
    let stream = stream_for(&cfg);
    let mut a = init_state(&cfg, stream.input_dim()).unwrap();
    let mut b = init_state(&cfg, stream.input_dim()).unwrap();
    run(&cfg, &stream, &mut a).unwrap();
    run(&cfg, &stream, &mut b).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.model, b.model);
    assert_eq!(a.traces, b.traces);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = small_config(8);
    let stream = stream_for(&cfg);
    let mut full = init_state(&cfg, stream.input_dim()).unwrap();
    run(&cfg, &stream, &mut full).unwrap();

    let mut part = init_state(&cfg, stream.input_dim()).unwrap();
    run_step(&cfg, &stream, &mut part, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.json");
    Checkpoint::capture(&part).save(&path).unwrap();
    let mut resumed = Checkpoint::load(&path).unwrap().restore();
    assert_eq!(Checkpoint::capture(&resumed), Checkpoint::capture(&part));
    run(&cfg, &stream, &mut resumed).unwrap();
    assert_eq!(resumed.metrics.to_csv(), full.metrics.to_csv());
    assert_eq!(resumed.model, full.model);
}

#[test]
fn checkpoint_version_is_checked() {
    let cfg = small_config(1);
    let stream = stream_for(&cfg);
    let state = init_state(&cfg, stream.input_dim()).unwrap();
    let text = Checkpoint::capture(&state).to_json().unwrap();
    let bumped = text.replacen("\"version\":1", "\"version\":99", 1);
    assert!(Checkpoint::from_json(&bumped).is_err());
    assert!(Checkpoint::from_json(&text).is_ok());
}

#[test]
fn step_order_buffer_and_space_invariants() {
    let cfg = small_config(2);
    let stream = stream_for(&cfg);
    let mut state = init_state(&cfg, stream.input_dim()).unwrap();
    let mut last_m = 0;
    for (t, task) in stream.tasks().iter().enumerate() {
        let before = state.buffer.clone();
        let snapshot = state.snapshot.clone();
        run_step(&cfg, &stream, &mut state, None).unwrap();
        // The buffer only gained this step's classes, after training.
        assert!(before.items().iter().all(|i| !task.labels.contains(&i.label)));
        for &l in &task.labels {
            assert_eq!(state.buffer.class_counts()[&l], 20);
        }
        // The previous snapshot was not touched; the new one is the trained model.
        if let (Some(old), Some(prev)) = (&snapshot, &state.traces.get(t)) {
            assert!(old.active.len() <= prev.m);
        }
        assert_eq!(state.snapshot.as_ref(), Some(&state.model));
        let m = state.model.active.len();
        assert!(m >= last_m && m == state.traces[t].m);
        last_m = m;
        assert_eq!(state.diagnostics[t].tau2.is_some(), t > 0);
    }
    assert_eq!(state.metrics.steps(), stream.len());
}

#[test]
fn single_step_stream_has_no_structure_terms_and_no_forgetting() {
    let mut cfg = small_config(3);
    cfg.data = DataSource::Synthetic(SynthSpec {
        classes: 3,
        steps: 1,
        samples_per_class: 40,
        ..SynthSpec::default()
    });
    let stream = stream_for(&cfg);
    let mut state = init_state(&cfg, stream.input_dim()).unwrap();
    run(&cfg, &stream, &mut state).unwrap();
    assert_eq!(state.diagnostics[0].tau2, None);
    let summary = state.metrics.summary().unwrap();
    assert_eq!(summary.average_forgetting, None);
    assert!(summary.final_accuracy > 1.0 / 3.0);
}

#[test]
fn noiseless_stream_is_learned_perfectly() {
    let mut cfg = small_config(6);
    cfg.data = DataSource::Synthetic(SynthSpec {
        classes: 4,
        steps: 1,
        samples_per_class: 40,
        noise: 0.0,
        ..SynthSpec::default()
    });
    cfg.train.epochs = 60;
    cfg.train.lr = 0.05;
    let stream = stream_for(&cfg);
    let mut state = init_state(&cfg, stream.input_dim()).unwrap();
    run(&cfg, &stream, &mut state).unwrap();
    assert_eq!(state.metrics.summary().unwrap().final_accuracy, 1.0);
}

#[test]
fn tree_structured_classes_favour_negative_curvature() {
    let (mut negative, mut positive) = (0.0, 0.0);
    for seed in 0..5 {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.tree_fraction = 1.0;
        }
        let stream = stream_for(&cfg);
        let mut state = init_state(&cfg, stream.input_dim()).unwrap();
        run(&cfg, &stream, &mut state).unwrap();
        let last = state.traces.last().unwrap();
        for (w, k) in last.weights.iter().zip(&last.curvatures) {
            if *k < 0.0 {
                negative += w;
            } else if *k > 0.0 {
                positive += w;
            }
        }
    }
    assert!(negative > positive, "negative mass {negative} vs positive {positive}");
}
