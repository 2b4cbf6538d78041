//! Pretraining loop, optimizer, schedule and linear probing.

pub mod config;
pub mod dropout;
pub mod optim;
pub mod probe;
pub mod schedule;
pub mod trainer;

pub use config::{default_stages, StageConfig, TrainConfig};
pub use dropout::{apply_name_dropout, UNKNOWN_SENSOR};
pub use optim::AdamW;
pub use probe::{linear_probe, random_backbone_probe, ProbeConfig, ProbeReport};
pub use schedule::Schedule;
pub use trainer::{EpochMetrics, StageReport, StepStats, Trainer};
