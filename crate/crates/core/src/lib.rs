//! Radio environment mapping by radial sequence modeling.
//!
//! Signal strength around a base station is treated as a set of sequences,
//! one per propagation direction, indexed by radial bin. A masked
//! transformer encoder is pretrained on free-space sequences and then
//! fine-tuned on sparse measurements. An ordinary kriging baseline, a
//! synthetic channel generator and evaluation metrics live alongside it.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod featurize;
pub mod geometry;
pub mod io;
pub mod kriging;
pub mod model;
pub mod parallel;
pub mod scenario;
pub mod training;

pub use error::{RemError, Result};
