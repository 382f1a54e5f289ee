//! The per-step training loop.
//!
//! Each step appends classifier rows for the new classes, searches the pool and
//! grows the space, trains the backbone and classifier on new data plus replayed
//! exemplars, freezes a snapshot for the next step and refreshes the buffer.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::MemoryBuffer;
use super::metrics::MetricsRecord;
use super::shuffled_batches;
use super::stream::{Instance, Stream};
use crate::autodiff::Tape;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gis::{self, build_pool, GisTrace, SelectionHistory};
use crate::model::{step_loss, ModelState, StepBatch, StructureReference};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// Mean total loss over the last epoch.
    pub final_loss: f64,
    pub tau2: Option<f64>,
    pub skipped_pairs: usize,
}

/// Everything carried between steps.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: ModelState,
    pub history: SelectionHistory,
    pub buffer: MemoryBuffer,
    /// Frozen end-of-previous-step model; never mutated during a step.
    pub snapshot: Option<ModelState>,
    pub rng: ChaCha8Rng,
    pub next_step: usize,
    pub metrics: MetricsRecord,
    pub traces: Vec<GisTrace>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Main-phase record: model at the start of main training, then every batch
/// (indices into the step's training set: new data first, then buffer) and its loss.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub initial: Option<ModelState>,
    pub train_set: Vec<Instance>,
    pub batches: Vec<Vec<usize>>,
    pub losses: Vec<f64>,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: usize,
    epoch: usize,
    iteration: usize,
    detail: String,
    labels: Vec<usize>,
    inputs: Vec<&'a [f64]>,
}

pub fn init_state(cfg: &ExperimentConfig, input_dim: usize) -> Result<RunState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = build_pool(cfg.model.feature_dim, &cfg.pool.sizes, cfg.pool.signs)?;
    let model = ModelState::new(&cfg.backbone_sizes(input_dim), cfg.model.output_gain, pool, &mut rng)?;
    Ok(RunState {
        model,
        history: SelectionHistory::default(),
        buffer: MemoryBuffer::new(cfg.buffer)?,
        snapshot: None,
        rng,
        next_step: 0,
        metrics: MetricsRecord::default(),
        traces: Vec::new(),
        diagnostics: Vec::new(),
    })
}

/// Runs every remaining step of `stream`.
pub fn run(cfg: &ExperimentConfig, stream: &Stream, state: &mut RunState) -> Result<()> {
    while state.next_step < stream.len() {
        run_step(cfg, stream, state, None)?;
    }
    Ok(())
}

pub fn run_step(
    cfg: &ExperimentConfig,
    stream: &Stream,
    state: &mut RunState,
    mut log: Option<&mut TrainLog>,
) -> Result<()> {
    let t = state.next_step;
    let task = stream
        .tasks()
        .get(t)
        .ok_or_else(|| Error::contract(format!("stream has no step {t}")))?;
    if task.labels.first() != Some(&state.model.num_classes()) {
        return Err(Error::contract(format!("step {t} labels do not continue the classifier")));
    }

    // (a) new classifier rows.
    state.model.add_classes(task.labels.len(), cfg.train.class_init_std, &mut state.rng);

    // (b) search and growth.
    let new_inputs: Vec<&[f64]> = task.train.iter().map(|i| i.input.as_slice()).collect();
    let new_labels: Vec<usize> = task.train.iter().map(|i| i.label).collect();
    let selected = if cfg.gis.enabled {
        gis::warmup_classifier(&mut state.model, &new_inputs, &new_labels, &cfg.gis, &mut state.rng)
            .map_err(|e| diverged(t, e))?;
        gis::gis_optimize(&mut state.model, &new_inputs, &new_labels, &cfg.gis, &mut state.rng)
            .map_err(|e| diverged(t, e))?;
        let weights = state.model.params.get(state.model.weights).data().to_vec();
        gis::select(&weights, cfg.gis.tau1.threshold(state.model.num_classes()), t == 0)
    } else {
        state.model.pool_indices()
    };
    state.model.active = state.history.expand(selected.clone());
    state.traces.push(gis::trace(&state.model, t + 1, selected));

    // (c) main training on D^t ∪ B.
    let mut train_set: Vec<&Instance> = task.train.iter().collect();
    train_set.extend(state.buffer.items());
    let buffer_inputs: Vec<&[f64]> = state.buffer.items().iter().map(|i| i.input.as_slice()).collect();
    let buffer_labels: Vec<usize> = state.buffer.items().iter().map(|i| i.label).collect();
    let reference = match &state.snapshot {
        Some(snap) if !buffer_inputs.is_empty() => Some(StructureReference::from_snapshot(
            snap,
            &buffer_inputs,
            &buffer_labels,
            cfg.structure.tau2,
        )?),
        _ => None,
    };
    let mut trainable = state.model.backbone.param_ids();
    trainable.push(state.model.classifier);
    state.model.params.train_only(&trainable);
    if let Some(log) = log.as_deref_mut() {
        log.initial = Some(state.model.clone());
        log.train_set = train_set.iter().map(|&i| i.clone()).collect();
    }

    let mut epoch_loss = 0.0;
    let mut skipped = 0;
    for epoch in 0..cfg.train.epochs {
        epoch_loss = 0.0;
        let batches = shuffled_batches(train_set.len(), cfg.train.batch_size, &mut state.rng);
        let count = batches.len();
        for (iteration, batch) in batches.into_iter().enumerate() {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train_set[i].input.as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_set[i].label).collect();
            let buffer_batch = match reference {
                Some(_) => state.buffer.sample_indices(cfg.train.pair_batch, &mut state.rng),
                None => Vec::new(),
            };
            let step_batch = StepBatch {
                inputs: &xs,
                labels: &ys,
                buffer_inputs: &buffer_inputs,
                buffer_batch: &buffer_batch,
            };
            let mut tape = Tape::new();
            let loss = step_loss(&mut tape, &state.model, &step_batch, reference.as_ref(), &cfg.structure)?;
            let checked = tape.check().and_then(|_| {
                let grads = tape.backward(loss.total)?;
                state.model.params.sgd_step(&grads, cfg.train.lr);
                let finite = state.model.params.entries().iter().all(|e| e.value.is_finite());
                if finite {
                    Ok(())
                } else {
                    Err(Error::numerical("sgd", "non-finite parameters after update"))
                }
            });
            if let Err(e) = checked {
                let dump = DivergenceDump {
                    step: t + 1,
                    epoch,
                    iteration,
                    detail: e.to_string(),
                    labels: ys,
                    inputs: xs,
                };
                return Err(Error::Diverged {
                    step: t + 1,
                    detail: e.to_string(),
                    dump: write_dump(cfg, &dump),
                });
            }
            let value = tape.scalar(loss.total);
            epoch_loss += value / count as f64;
            skipped += loss.skipped_pairs;
            if let Some(log) = log.as_deref_mut() {
                log.batches.push(batch);
                log.losses.push(value);
            }
        }
    }
    state.diagnostics.push(StepDiagnostics {
        step: t + 1,
        final_loss: epoch_loss,
        tau2: reference.as_ref().map(|r| r.tau2),
        skipped_pairs: skipped,
    });

    // (d) snapshot, (e) buffer.
    state.snapshot = Some(state.model.clone());
    state.buffer.update(&task.train, &mut state.rng);
    state.next_step += 1;

    let per_task = evaluate(&state.model, stream, t)?;
    state.metrics.push_step(&per_task)
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NumericalDomain { .. } => Error::Diverged {
            step: step + 1,
            detail: e.to_string(),
            dump: None,
        },
        other => other,
    }
}

fn write_dump(cfg: &ExperimentConfig, dump: &DivergenceDump<'_>) -> Option<PathBuf> {
    let dir = cfg.output_dir.as_ref()?;
    std::fs::create_dir_all(dir).ok()?;
    let path = dir.join(format!("divergence_step{}.json", dump.step));
    let text = serde_json::to_string_pretty(dump).ok()?;
    std::fs::write(&path, text).ok()?;
    Some(path)
}

/// `(correct, total)` on each task `0..=t` under argmax classification over all seen classes.
pub fn evaluate(model: &ModelState, stream: &Stream, t: usize) -> Result<Vec<(usize, usize)>> {
    stream.tasks()[..=t]
        .iter()
        .map(|task| {
            let xs: Vec<&[f64]> = task.test.iter().map(|i| i.input.as_slice()).collect();
            let pred = model.predict(&xs)?;
            let correct = pred.iter().zip(&task.test).filter(|(p, i)| **p == i.label).count();
            Ok((correct, task.test.len()))
        })
        .collect()
}
