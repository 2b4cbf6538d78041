//! Synthetic data, patch storage, normalization and batching.

pub mod dataset;
pub mod loader;
pub mod sampler;
pub mod stats;
pub mod storage;
pub mod synth;

pub use dataset::{generate, Dataset, DatasetSelector, GenConfig, GenSummary};
pub use loader::{batch_iterator, plan_epoch, Batch, BatchPlan, LoaderConfig, Sample};
pub use stats::{NormStats, StatsOptions};
pub use storage::Patch;
pub use synth::HsiCube;
