//! Output-feedback tube MPC for linear systems with dynamic uncertainties
//! described by hard integral quadratic constraints.

// links the BLAS/LAPACK symbols needed by the SDP backend
use openblas_src as _;

pub mod analysis;
pub mod config;
pub mod error;
pub mod estimator;
pub mod example;
pub mod iqc;
pub mod mpc;
pub mod numerics;
pub mod pipeline;
pub mod plant;
pub mod report;
pub mod sim;
pub mod terminal;
pub mod tube;

pub use error::{Error, Result};
pub use numerics::SymMatrix;
