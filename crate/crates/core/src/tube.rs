//! Scalar-radius tubes: the error-bound recursion, initial-state
//! interpolation, constraint tightening and initial bounds.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{alpha_of, AnalysisCertificate};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{max_quadratic_on_ellipsoid, SymMatrix};

/// Constants of one tube channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeParams {
    pub gamma: f64,
    pub mu: f64,
    pub rho: f64,
    pub gamma_d: f64,
}

impl TubeParams {
    pub fn new(gamma: f64, mu: f64, rho: f64, gamma_d: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!("rho = {rho} outside (0, 1)")));
        }
        if !(gamma >= mu && mu >= 0.0 && gamma > 0.0) || !(gamma_d >= 0.0) {
            return Err(Error::InvalidParameter(format!("need gamma >= mu >= 0 and gamma_d >= 0, got {gamma}, {mu}, {gamma_d}")));
        }
        Ok(TubeParams { gamma, mu, rho, gamma_d })
    }

    pub fn from_certificate(cert: &AnalysisCertificate, gamma_d: f64) -> Result<Self> {
        TubeParams::new(cert.gamma, cert.mu, cert.rho, gamma_d)
    }

    pub fn alpha(&self) -> f64 {
        alpha_of(self.rho)
    }

    pub fn beta(&self) -> f64 {
        self.alpha() * (self.gamma - self.mu)
    }

    /// `alpha * mu * gamma_d^2`, the limit of the recursion for `q = 0`.
    pub fn steady_state(&self) -> f64 {
        self.alpha() * self.mu * self.gamma_d * self.gamma_d
    }
}

/// `rho^2 c + mu rho^2 (|q|^2 + gamma_d^2)`.
pub fn propagate(c: f64, q: &DVector<f64>, params: &TubeParams) -> f64 {
    propagate_sq(c, q.norm_squared(), params)
}

pub fn propagate_sq(c: f64, q2: f64, params: &TubeParams) -> f64 {
    let r2 = params.rho * params.rho;
    r2 * c + params.mu * r2 * (q2 + params.gamma_d * params.gamma_d)
}

/// Squared tube radius `(gamma/alpha)(c + beta (|q|^2 + gamma_d^2))`.
pub fn radius_sq(c: f64, q2: f64, params: &TubeParams) -> f64 {
    params.gamma / params.alpha() * (c + params.beta() * (q2 + params.gamma_d * params.gamma_d))
}

/// Amount the constraint bound is tightened by.
pub fn tightening_radius(c: f64, q: &DVector<f64>, params: &TubeParams) -> f64 {
    radius_sq(c, q.norm_squared(), params).max(0.0).sqrt()
}

/// Convex combination of prediction and estimate, `nu` weighting the
/// prediction.
pub fn interpolate(pred: (&DVector<f64>, &[f64]), est: (&DVector<f64>, &[f64]), nu: f64) -> Result<(DVector<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&nu) {
        return Err(Error::InvalidParameter(format!("nu = {nu} outside [0, 1]")));
    }
    if pred.0.len() != est.0.len() || pred.1.len() != est.1.len() {
        return dim_err("prediction and estimate sizes differ");
    }
    let theta = pred.0 * nu + est.0 * (1.0 - nu);
    let c = pred.1.iter().zip(est.1).map(|(a, b)| nu * a + (1.0 - nu) * b).collect();
    Ok((theta, c))
}

/// `max x' P_xx x` over `{x : |E x| <= 1}`, where `P_xx` is the block of
/// `p` starting at `offset` with the size of `shape`. No shape means the
/// initial estimate is exact.
pub fn initial_bound(p: &SymMatrix, offset: usize, shape: Option<&DMatrix<f64>>) -> Result<f64> {
    let Some(e) = shape else { return Ok(0.0) };
    if offset + e.ncols() > p.dim() {
        return dim_err("initial error ellipsoid larger than the storage matrix");
    }
    max_quadratic_on_ellipsoid(p.sub_block(offset, e.ncols()).as_matrix(), e)
}

/// Tube with one channel for all constraint rows or one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "channels", rename_all = "snake_case")]
pub enum Tube {
    Scalar(TubeParams),
    Rowwise(Vec<TubeParams>),
}

impl Tube {
    pub fn channels(&self) -> Vec<TubeParams> {
        match self {
            Tube::Scalar(p) => vec![*p],
            Tube::Rowwise(v) => v.clone(),
        }
    }

    pub fn n_channels(&self) -> usize {
        match self {
            Tube::Scalar(_) => 1,
            Tube::Rowwise(v) => v.len(),
        }
    }

    /// Channel bounding constraint row `row`.
    pub fn channel_of_row(&self, row: usize) -> usize {
        match self {
            Tube::Scalar(_) => 0,
            Tube::Rowwise(_) => row,
        }
    }

    pub fn params(&self, channel: usize) -> &TubeParams {
        match self {
            Tube::Scalar(p) => p,
            Tube::Rowwise(v) => &v[channel],
        }
    }

    pub fn gamma_d(&self) -> f64 {
        self.params(0).gamma_d
    }

    /// Per-channel bounds propagated one step.
    pub fn propagate(&self, c: &[f64], q: &DVector<f64>) -> Vec<f64> {
        let q2 = q.norm_squared();
        c.iter().enumerate().map(|(i, &ci)| propagate_sq(ci, q2, self.params(i))).collect()
    }

    /// Tightening per constraint row.
    pub fn radii(&self, c: &[f64], q: &DVector<f64>, n_rows: usize) -> Vec<f64> {
        let q2 = q.norm_squared();
        (0..n_rows)
            .map(|r| {
                let ch = self.channel_of_row(r);
                radius_sq(c[ch], q2, self.params(ch)).max(0.0).sqrt()
            })
            .collect()
    }
}

/// Predicted bounds of one MPC solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeTrajectory {
    /// `c[k][channel]` for `k = 0..=N`.
    pub c: Vec<Vec<f64>>,
    pub nu: f64,
    /// Prediction carried into the next time step.
    pub carry: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(gamma: f64, mu: f64, rho: f64, gd: f64) -> TubeParams {
        TubeParams::new(gamma, mu, rho, gd).unwrap()
    }

    #[test]
    fn propagation_arithmetic() {
        let z = DVector::zeros(2);
        assert_eq!(propagate(0.0, &z, &params(1.0, 1.0, 0.85, 0.0)), 0.0);
        assert!((propagate(1.0, &z, &params(1.0, 1.0, 0.85, 0.0)) - 0.7225).abs() < 1e-15);
        let p = params(1.0, 1.0, 0.85, 1.0);
        let mut c = 0.0;
        for _ in 0..200 {
            c = propagate(c, &z, &p);
        }
        // independent fixed point of c = r2 (c + 1)
        let fixed = 0.7225 / (1.0 - 0.7225);
        assert!((c - fixed).abs() < 1e-9);
        assert!((c - 2.6036036).abs() < 1e-7);
    }

    #[test]
    fn radius_identities() {
        let z = DVector::zeros(1);
        assert_eq!(tightening_radius(0.0, &z, &params(1.0, 0.0, 0.5, 0.0)), 0.0);
        let p = params(0.8, 0.3, 0.85, 0.9);
        let r = tightening_radius(p.steady_state(), &z, &p);
        assert!((r - 0.8 * 0.9).abs() < 1e-12);
        let p = params(0.7, 0.7, 0.85, 0.0);
        assert!((tightening_radius(p.alpha() / 0.7, &z, &p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = DVector::from_row_slice(&[1.0, 2.0]);
        let b = DVector::from_row_slice(&[3.0, -2.0]);
        let (t, c) = interpolate((&a, &[4.0]), (&b, &[2.0]), 1.0).unwrap();
        assert_eq!((t, c), (a.clone(), vec![4.0]));
        let (t, c) = interpolate((&a, &[4.0]), (&b, &[2.0]), 0.0).unwrap();
        assert_eq!((t, c), (b.clone(), vec![2.0]));
        let (t, c) = interpolate((&a, &[4.0]), (&b, &[2.0]), 0.5).unwrap();
        assert_eq!((t, c), (DVector::from_row_slice(&[2.0, 0.0]), vec![3.0]));
        assert!(interpolate((&a, &[4.0]), (&b, &[2.0]), 1.5).is_err());
    }

    #[test]
    fn initial_bound_cases() {
        let p = SymMatrix::symmetrized(DMatrix::from_diagonal_element(3, 3, 2.0));
        assert_eq!(initial_bound(&p, 1, None).unwrap(), 0.0);
        let r = 0.3;
        let e = DMatrix::from_diagonal_element(2, 2, 1.0 / r);
        assert!((initial_bound(&p, 1, Some(&e)).unwrap() - 2.0 * r * r).abs() < 1e-14);
    }

    #[test]
    fn initial_bound_dominates_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let p = SymMatrix::symmetrized(&g * g.transpose());
        let e = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(2, 2) * 2.0;
        let bound = initial_bound(&p, 1, Some(&e)).unwrap();
        let pxx = p.sub_block(1, 2);
        let einv = e.clone().try_inverse().unwrap();
        let mut best: f64 = 0.0;
        for _ in 0..100_000 {
            let v = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let v = if v.norm() > 1.0 { v.normalize() } else { v };
            best = best.max(pxx.quad_form(&(&einv * v)));
        }
        assert!(best <= bound + 1e-12);
        assert!(best >= 0.99 * bound);
    }

    #[test]
    fn rowwise_tube_uses_own_channel() {
        let t = Tube::Rowwise(vec![params(1.0, 0.5, 0.8, 0.1), params(2.0, 0.5, 0.9, 0.1)]);
        let q = DVector::from_element(1, 0.3);
        let c = [0.1, 0.2];
        let r = t.radii(&c, &q, 2);
        assert!((r[0] - radius_sq(0.1, 0.09, t.params(0)).sqrt()).abs() < 1e-15);
        assert!((r[1] - radius_sq(0.2, 0.09, t.params(1)).sqrt()).abs() < 1e-15);
        let s = Tube::Scalar(params(1.0, 0.5, 0.8, 0.1));
        assert_eq!(s.radii(&[0.1], &q, 3).len(), 3);
    }
}
