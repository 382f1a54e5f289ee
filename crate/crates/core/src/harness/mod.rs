//! Continual-learning orchestration: streams, exemplar memory, the training
//! loop and its metrics.

pub mod buffer;
pub mod metrics;
pub mod stream;
pub mod synth;
pub mod trainer;

use rand::seq::SliceRandom;
use rand::Rng;

pub use buffer::{BufferPolicy, MemoryBuffer};
pub use metrics::{MetricsRecord, Summary};
pub use stream::{Instance, Stream, StreamTask};
pub use synth::{generate_synthetic_stream, SynthSpec};
pub use trainer::{evaluate, init_state, run, run_step, RunState, TrainLog};

/// A random permutation of `0..n` cut into consecutive batches of `size`.
pub fn shuffled_batches<R: Rng>(n: usize, size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}
