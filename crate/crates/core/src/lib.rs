//! Monocular 3-D human pose lifting with a full-perspective camera in the loop.
//!
//! The crate bundles everything needed to train and evaluate the two
//! networks at desk scale on synthetic data:
//!
//! - [`skeleton`]: the 17-joint topology and pose containers,
//! - [`camera`]: projection, unprojection and camera estimation,
//! - [`constraints`]: bone-ratio, limb-fold, cycle and likelihood losses,
//! - [`normflow`]: a Glow-style normalizing flow used as a 2-D pose prior,
//! - [`diffopt`]: reverse-mode differentiation, AdamW and loss balancing,
//! - [`liftnet`]: the lifter MLP and its cycle-consistency training,
//! - [`regnet`]: the capsule decoder head regressing pose and camera,
//! - [`metrics`]: MPJPE, PA-MPJPE, N-MPJPE, N-PCK and AUC,
//! - [`data`]: the synthetic generator and dataset/feature file IO,
//! - [`cli`]: the `poselift` command-line pipeline.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

// `!(x > 0.0)` is the idiom used throughout to reject NaN along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod checkpoint;
pub mod cli;
pub mod constraints;
pub mod data;
pub mod diffopt;
pub mod error;
pub mod liftnet;
pub mod metrics;
pub mod nn;
pub mod normflow;
pub mod regnet;
pub mod skeleton;

pub use error::{Error, Result};
