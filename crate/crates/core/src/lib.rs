//! Contrastive masked autoencoder (CMAE) pre-training at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors, define-by-run reverse-mode autodiff, parameter storage
//!   and a finite-difference gradient oracle.
//! * [`nn`]: ViT building blocks (patch embedding, sine-cosine positions, pre-norm
//!   transformer blocks, MLP heads).
//! * [`augment`]: master crops, pixel-shifted view pairs, color transfer, random masks,
//!   per-patch target normalization.
//! * [`model`]: the online encoder, EMA momentum encoder, pixel and feature decoders.
//! * [`objectives`]: masked reconstruction, InfoNCE, the BYOL-style alternative and
//!   their weighted sum.
//! * [`pipeline`]: CIFAR-10 ingestion, AdamW with warmup-cosine schedule, the
//!   pre-training loop, checkpoints and metrics.
//! * [`eval`]: feature extraction, linear probing, partial fine-tuning, feature
//!   statistics and the ablation grid.

pub mod augment;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{CmaeError, Result};
