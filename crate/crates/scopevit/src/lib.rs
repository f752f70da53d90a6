//! Masked-image pretraining for endoscopic video models.
//!
//! The crate pairs a small self-contained tensor/autodiff core with the
//! pieces of a pretrain-then-finetune pipeline: corpus curation, a ViT
//! encoder, the masked reconstruction objective, schedule/LLRD/SWA
//! optimization, downstream heads (action triplets, surgical phases) and
//! their metrics, plus a CLI with reproducible file formats.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod numerics;
pub mod heads;
pub mod mae;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod vit;

pub use error::{Error, Result};
