//! Region-level point-language contrastive learning: association of 3D points
//! to captioned 2D regions, multi-source pair fusion, contrastive losses with
//! analytic gradients, a small trainable point encoder and open-world
//! segmentation metrics, with a synthetic scene and caption-source simulator.

// `!(x > 0.0)` is the NaN-rejecting form used by every validator.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalkit;
pub mod exec;
pub mod fusion;
pub mod geom;
pub mod lang;
pub mod learn;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use exec::Exec;
