//! Contrastive-learning unsupervised domain adaptation for semantic
//! segmentation, end to end on synthetic source/target domains.

// Validation writes `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod multires;
pub mod network;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
