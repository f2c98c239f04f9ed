//! The two-state benchmark plant used by tests, benches and the shipped
//! configuration.

use nalgebra::DMatrix;

use crate::plant::Plant;

/// Norm bound of the benchmark's loop-transformed uncertainty.
pub const UNCERTAINTY_BOUND: f64 = 0.2285;
/// Smallest decay rate for which the bound is asserted.
pub const RHO_MIN: f64 = 0.85;

/// Two-state plant with one uncertainty channel, one disturbance, one input,
/// full state measurement and constraint signals `[x1; x2; u]`.
pub fn two_state_plant() -> Plant {
    let m = DMatrix::from_row_slice;
    Plant::new(
        m(2, 2, &[0.995, 0.095, -0.095, 0.900]),
        m(2, 1, &[0.005, 0.095]),
        m(2, 1, &[0.002, 0.038]),
        m(2, 1, &[0.005, 0.095]),
        m(1, 2, &[1.0, 1.0]),
        m(1, 1, &[0.0]),
        m(1, 1, &[0.0]),
        m(1, 1, &[-1.0]),
        m(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
        m(3, 1, &[0.0; 3]),
        m(3, 1, &[0.0; 3]),
        m(3, 1, &[0.0, 0.0, 1.0]),
        m(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        m(2, 1, &[0.0; 2]),
        m(2, 1, &[0.0; 2]),
    )
    .expect("benchmark plant is consistent")
}

/// Interval bounds `[lo, hi]` on the three constraint signals.
pub fn two_state_bounds() -> Vec<(f64, f64)> {
    vec![(-0.1, 1.0), (-0.25, 0.05), (-1.0, 1.0)]
}
