//! Rotation-conditioned pseudo-negatives for self-supervised point cloud
//! representations.
//!
//! The crate bundles rotation geometry ([`rot3`]), a small reverse-mode
//! autodiff engine ([`diffkit`]), a patch-based point cloud encoder
//! ([`encoder`]), the rotation-conditioned weight predictor ([`cope`]), the
//! training objectives ([`losses`]), the training loop ([`trainer`]) and
//! test-time pose estimation ([`pose`]).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cope;
pub mod diffkit;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod par;
pub mod params;
pub mod pose;
pub mod rng;
pub mod rot3;
pub mod trainer;

pub use error::{Error, Result};
