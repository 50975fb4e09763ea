//! Desk-scale contrastive pretraining with multi-level supervision and
//! global/local jigsaw views.
//!
//! The crate is organized around the training pipeline: [`augment`] builds the
//! two global views and two shuffled patch sets of a sample, [`model`] holds
//! the staged encoder with per-stage projection heads plus the momentum copy,
//! [`memory`] keeps the FIFO banks of key embeddings that serve as negatives,
//! [`contrast`] computes the InfoNCE branch losses and the weighted total,
//! and [`trainer`] ties everything into a step loop with checkpoints and a
//! metrics log. [`data`], [`eval`] and [`viz`] cover dataset ingestion, linear
//! probing of frozen stage features and attention-map/plot emission.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod data;
pub mod error;
pub mod eval;
pub mod image_ops;
pub mod memory;
pub mod model;
pub mod rng;
pub mod trainer;
pub mod viz;

pub use config::ExperimentConfig;
pub use contrast::{DetcoLossReport, LossWeights, StageLosses, Temperatures};
pub use error::{DetcoError, Result};
pub use image_ops::SourceImage;
pub use memory::{FeatureQueue, QueueBank};
pub use model::{EmbeddingSet, EncoderConfig, ParameterSet, StageFeatures};
pub use trainer::{TrainConfig, TrainState};
