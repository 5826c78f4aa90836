//! Discriminative class-token optimization for a toy conditional diffusion
//! model.
//!
//! A small token-conditioned denoiser is trained on labeled 2-D point
//! clouds. A new conditioning token is then added to its vocabulary and its
//! embedding alone is optimized so that guided generations are assigned to a
//! target class by a frozen classifier. The classifier loss reaches the token
//! only through the final denoising step.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod forge;
pub mod grad;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
