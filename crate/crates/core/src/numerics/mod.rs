//! Dense linear algebra helpers and the conic programming layer.

pub mod conic;
pub mod linalg;
pub mod search;
pub mod serde_mat;

pub use conic::{AffineMatrix, ConicProgram, ConicSettings, ConicSolution, DEFAULT_STRICT_EPS};
pub use linalg::*;
