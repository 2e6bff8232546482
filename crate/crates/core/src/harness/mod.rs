//! Synthetic benchmark, training loop, evaluation, property suites and
//! file formats used by the `hssh` binary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod export;
pub mod train;
pub mod verify;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ExperimentConfig, RunConfig};
pub use data::{generate_dataset, Dataset, DomainStyle, Splits, SyntheticConfig, SyntheticSample};
pub use eval::{evaluate, predict};
pub use export::{style_export, StyleRow};
pub use train::{train, EpochMetrics, Model, TrainOutcome};
pub use verify::{verify, Report, SuiteResult};

/// Independent random streams, so that e.g. changing the dataset never
/// perturbs parameter initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Style = 3,
    Shuffle = 4,
}

/// Deterministic generator for (`seed`, `stream`, `index`).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 64-bit stream id: purpose in the top byte, index below.
    rng.set_stream(((stream as u64) << 56) ^ index);
    rng
}
