//! Dual-stream single-image reflection separation.
//!
//! A mixed photograph `I` is decomposed into a transmission layer `T`, a reflection
//! layer `R` and a learnable residue `Phi` such that `I ≈ T + R + Phi`. The crate holds
//! the network, its training objective, data synthesis, metrics and a training loop.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod train;

pub use backbone::{Backbone, BackboneConfig, BackboneSource};
pub use blocks::{mugi_gate, FeaturePair, InteractionMode, MugiBlock};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{Error, Result};
pub use image::Image;
pub use losses::{LossBreakdown, LossWeights, ReconstructionMode};
pub use model::{DsrNet, EncoderKind, ModelConfig};
pub use train::{TrainConfig, Trainer};
