//! Variable-channel hyperspectral masked autoencoder whose patch embedding
//! and reconstruction head are generated per band by hypernetworks
//! conditioned on sensor metadata and image content.

// `!(x > 0.0)` guards reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod checkpoint;
pub mod config;
pub mod content;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod hyper;
pub mod loss;
pub mod mae;
pub mod meta;
pub mod nn;
pub mod sensor;
pub mod text;
pub mod train;

pub use config::{BackboneConfig, Conditioning, HyperConfig, ModelConfig};
pub use error::{Error, Result};
pub use graph::Graph;
pub use mae::{HyperMae, MaskPlan};
pub use sensor::{BandSelection, Level, SensorSpec};
pub use text::TextEmbeddingProvider;
