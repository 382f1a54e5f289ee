//! Versioned JSON container for a run between steps.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gis::{GisTrace, SelectionHistory};
use crate::harness::buffer::MemoryBuffer;
use crate::harness::metrics::MetricsRecord;
use crate::harness::trainer::{RunState, StepDiagnostics};
use crate::model::ModelState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    version: u32,
    model: ModelState,
    history: SelectionHistory,
    buffer: MemoryBuffer,
    snapshot: Option<ModelState>,
    rng: RngState,
    next_step: usize,
    metrics: MetricsRecord,
    traces: Vec<GisTrace>,
    diagnostics: Vec<StepDiagnostics>,
}

impl Checkpoint {
    pub fn capture(state: &RunState) -> Self {
        Self {
            version: FORMAT_VERSION,
            model: state.model.clone(),
            history: state.history.clone(),
            buffer: state.buffer.clone(),
            snapshot: state.snapshot.clone(),
            rng: RngState {
                seed: state.rng.get_seed(),
                stream: state.rng.get_stream(),
                word_pos: state.rng.get_word_pos(),
            },
            next_step: state.next_step,
            metrics: state.metrics.clone(),
            traces: state.traces.clone(),
            diagnostics: state.diagnostics.clone(),
        }
    }

    pub fn restore(self) -> RunState {
        let mut rng = ChaCha8Rng::from_seed(self.rng.seed);
        rng.set_stream(self.rng.stream);
        rng.set_word_pos(self.rng.word_pos);
        RunState {
            model: self.model,
            history: self.history,
            buffer: self.buffer,
            snapshot: self.snapshot,
            rng,
            next_step: self.next_step,
            metrics: self.metrics,
            traces: self.traces,
            diagnostics: self.diagnostics,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("version").and_then(serde_json::Value::as_u64);
        if version != Some(FORMAT_VERSION as u64) {
            return Err(Error::config(format!(
                "unsupported checkpoint version {version:?}, expected {FORMAT_VERSION}"
            )));
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
