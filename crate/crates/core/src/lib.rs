//! Dual-stream face presentation attack detection with a learnable
//! multi-level DCT frequency decomposition front-end.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small CPU layer library with explicit forward/backward passes,
//!   generic over `f32` (training) and `f64` (gradient verification).
//! - [`freq`]: orthonormal 2-D DCT, band partition and the learnable filter bank.
//! - [`attention`]: spatial and channel attention blocks.
//! - [`network`]: backbones, the dual-stream model and its heads.
//! - [`losses`]: smooth-L1 pixel loss, focal loss, BCE and the weighted schedule.
//! - [`data`]: manifests, frame sampling, image loading, augmentation,
//!   class balancing and the synthetic corpus generator.
//! - [`eval`]: PAD error rates, AUC, EER thresholding, protocol runners and
//!   embedding reduction.
//! - [`train`]: configuration, SGD, the training loop, checkpoints and ablations.
//! - [`gradcheck`]: finite-difference checks of the backward passes.

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod freq;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Scalar;
