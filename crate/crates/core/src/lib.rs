//! Dual-branch adapted encoder for promptable medical image segmentation.
//!
//! A frozen ViT gets a trainable channel-attention adapter after each of its
//! attention blocks, a light-weight convolution stem reads a low-resolution
//! copy of the image, bilateral deformable cross-attention exchanges
//! information between the two streams after every ViT stage, and a
//! sigmoid-gated blend fuses both streams into the image embedding handed to
//! a small box-prompted mask decoder.
//!
//! Everything here is `no_std` + `alloc`: the tensor type, the tape-based
//! reverse-mode autodiff ([`autodiff`]), every differentiable kernel, the
//! model, the losses and metrics, the optimizer and the training loop all
//! operate on in-memory data. File formats and the command line live in the
//! companion `dbsam` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod config;
pub mod conv_branch;
pub mod data;
pub mod decoder;
mod error;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prompt;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{Tape, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::DbSamModel;
pub use nn::{ParamId, ParamRole, ParamStore};
pub use tensor::Tensor;

/// Deterministic random source used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a [`Rng`].
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
