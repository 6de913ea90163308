//! Omniview tuning at desk scale: minimax cross-viewpoint alignment of a
//! dual-stream contrastive model with low-rank adapters.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod seeding;
pub mod synthdata;
pub mod trainer;
pub mod viewpoints;

pub use error::{OvtError, Result};
pub use linalg::Matrix;
