//! Terminal cost and terminal set design and verification.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::serde_mat;
use crate::numerics::{inverse, psd_margin, solve_discrete_lyapunov, spectral_norm, two_to_inf_norm, SymMatrix};
use crate::tube::{radius_sq, Tube};

/// Slack allowed when re-checking the terminal conditions.
pub const TERMINAL_TOL: f64 = 1e-9;

/// Terminal cost `S`, set `{|T theta|^2 <= theta_f}` and per-channel
/// bounds `c_f` on the tube size at the end of the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalIngredients {
    pub s: SymMatrix,
    #[serde(with = "serde_mat")]
    pub t: DMatrix<f64>,
    pub theta_f: f64,
    pub c_f: Vec<f64>,
}

/// Nominal loop data the terminal conditions depend on.
#[derive(Debug, Clone, Copy)]
pub struct TerminalData<'a> {
    pub a: &'a DMatrix<f64>,
    pub c_q: &'a DMatrix<f64>,
    pub c_z: &'a DMatrix<f64>,
    /// State block of the stage weight.
    pub q_theta: &'a SymMatrix,
}

impl TerminalData<'_> {
    fn check(&self) -> Result<()> {
        let n = self.a.nrows();
        if !self.a.is_square() || self.c_q.ncols() != n || self.c_z.ncols() != n || self.q_theta.dim() != n {
            return dim_err("terminal data dimensions are inconsistent");
        }
        Ok(())
    }
}

/// `(gamma_w^f)^2 = |C_q T^-1|^2 theta_f + gamma_d^2`.
pub fn gamma_w_sq(c_q_tinv_norm: f64, theta_f: f64, gamma_d: f64) -> f64 {
    c_q_tinv_norm * c_q_tinv_norm * theta_f + gamma_d * gamma_d
}

/// Slack of each terminal condition; every entry must be `<= TERMINAL_TOL`
/// for the ingredients to be valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalReport {
    /// max eig of `A'SA - S + Q_theta`
    pub cost_decrease: f64,
    /// max eig of `A'T'TA - T'T`
    pub set_invariance: f64,
    /// per channel `mu rho^2 gamma_w^2 - c_f (1 - rho^2)`
    pub bound_invariance: Vec<f64>,
    /// per row `|C_z T^-1|_{2,inf} sqrt(theta_f) - 1 + radius`
    pub feasibility: Vec<f64>,
}

impl TerminalReport {
    pub fn worst(&self) -> f64 {
        self.bound_invariance
            .iter()
            .chain(&self.feasibility)
            .copied()
            .fold(self.cost_decrease.max(self.set_invariance), f64::max)
    }

    pub fn passes(&self) -> bool {
        self.worst() <= TERMINAL_TOL
    }
}

pub fn verify_terminal(ing: &TerminalIngredients, data: &TerminalData, tube: &Tube) -> Result<TerminalReport> {
    data.check()?;
    let n = data.a.nrows();
    if ing.s.dim() != n || ing.t.shape() != (n, n) || ing.c_f.len() != tube.n_channels() {
        return dim_err("terminal ingredients do not match the loop");
    }
    if ing.theta_f < 0.0 || ing.c_f.iter().any(|&c| c < 0.0) {
        return Err(Error::CertificateInvalid("terminal constants must be nonnegative".into()));
    }
    let a = data.a;
    let tt = ing.t.transpose() * &ing.t;
    if SymMatrix::symmetrized(tt.clone()).min_eigenvalue() <= 0.0 || ing.s.min_eigenvalue() <= 0.0 {
        return Err(Error::CertificateInvalid("terminal cost and set shape must be positive definite".into()));
    }
    let tinv = inverse(&ing.t)?;
    let (nq, nz) = (spectral_norm(&(data.c_q * &tinv)), two_to_inf_norm(&(data.c_z * &tinv)));
    let gw2 = gamma_w_sq(nq, ing.theta_f, tube.gamma_d());
    let bound_invariance = (0..tube.n_channels())
        .map(|i| {
            let p = tube.params(i);
            p.mu * p.rho * p.rho * gw2 - ing.c_f[i] * (1.0 - p.rho * p.rho)
        })
        .collect();
    let feasibility = (0..data.c_z.nrows())
        .map(|r| {
            let ch = tube.channel_of_row(r);
            let p = tube.params(ch);
            // radius_sq adds beta (q^2 + gamma_d^2); pass the gamma_w part as q^2
            let rad = radius_sq(ing.c_f[ch], gw2 - p.gamma_d * p.gamma_d, p).max(0.0).sqrt();
            nz * ing.theta_f.sqrt() - 1.0 + rad
        })
        .collect();
    Ok(TerminalReport {
        cost_decrease: psd_margin(&(a.transpose() * ing.s.as_matrix() * a - ing.s.as_matrix() + data.q_theta.as_matrix())),
        set_invariance: psd_margin(&(a.transpose() * &tt * a - &tt)),
        bound_invariance,
        feasibility,
    })
}

fn lyapunov_cost(data: &TerminalData) -> Result<SymMatrix> {
    solve_discrete_lyapunov(data.a, data.q_theta)
}

fn check_gain(tube: &Tube) -> Result<()> {
    for i in 0..tube.n_channels() {
        let p = tube.params(i);
        if p.gamma * p.gamma_d > 1.0 {
            return Err(Error::PreconditionViolated(format!(
                "gamma * gamma_d = {} > 1 on channel {i}",
                p.gamma * p.gamma_d
            )));
        }
    }
    Ok(())
}

fn finish(ing: TerminalIngredients, data: &TerminalData, tube: &Tube) -> Result<TerminalIngredients> {
    let report = verify_terminal(&ing, data, tube)?;
    if !report.passes() {
        return Err(Error::InfeasibleTerminal(format!("terminal conditions violated by {:.3e}", report.worst())));
    }
    Ok(ing)
}

/// Constructive design: `S` from the Lyapunov equation, `T'T = S`,
/// `theta_f = 0` and `c_f = alpha mu gamma_d^2` per channel.
pub fn design_basic(data: &TerminalData, tube: &Tube) -> Result<TerminalIngredients> {
    data.check()?;
    check_gain(tube)?;
    let s = lyapunov_cost(data)?;
    let t = crate::numerics::gram_factor(&s)?;
    let c_f = tube.channels().iter().map(|p| p.steady_state()).collect();
    finish(TerminalIngredients { s, t, theta_f: 0.0, c_f }, data, tube)
}

/// Options of the enlarged terminal region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnlargedOptions {
    /// Ratio `r_f >= 1`.
    pub ratio: f64,
    /// Set shape replacing `T` with `T'T = S`.
    #[serde(default, with = "serde_mat::option")]
    pub shape: Option<DMatrix<f64>>,
    pub iterations: usize,
}

impl Default for EnlargedOptions {
    fn default() -> Self {
        EnlargedOptions { ratio: 1.0, shape: None, iterations: 100 }
    }
}

fn remark_bound(tube: &Tube, nq: f64, ratio: f64, theta_f: f64) -> Vec<f64> {
    tube.channels()
        .iter()
        .map(|p| p.alpha() * p.mu * (p.gamma_d * p.gamma_d + ratio * nq * nq * theta_f))
        .collect()
}

/// Enlarged terminal region: fixes `c_f` as a function of `theta_f` and
/// maximizes `theta_f` by bisection. For a componentwise tube the `c_f`
/// are then raised to the largest values the feasibility condition allows.
pub fn design_enlarged(data: &TerminalData, tube: &Tube, opts: &EnlargedOptions) -> Result<TerminalIngredients> {
    data.check()?;
    check_gain(tube)?;
    if !(opts.ratio >= 1.0) {
        return Err(Error::InvalidParameter(format!("terminal ratio {} < 1", opts.ratio)));
    }
    let s = lyapunov_cost(data)?;
    let t = match &opts.shape {
        Some(t) => t.clone(),
        None => crate::numerics::gram_factor(&s)?,
    };
    let tinv = inverse(&t)?;
    let (nq, nz) = (spectral_norm(&(data.c_q * &tinv)), two_to_inf_norm(&(data.c_z * &tinv)));
    let feasible = |theta_f: f64| -> bool {
        let c_f = remark_bound(tube, nq, opts.ratio, theta_f);
        let gw2 = gamma_w_sq(nq, theta_f, tube.gamma_d());
        (0..data.c_z.nrows()).all(|r| {
            let ch = tube.channel_of_row(r);
            let p = tube.params(ch);
            let rad = radius_sq(c_f[ch], gw2 - p.gamma_d * p.gamma_d, p).max(0.0).sqrt();
            nz * theta_f.sqrt() <= 1.0 - rad
        })
    };
    let (mut lo, mut hi) = (0.0, if nz > 0.0 { 1.0 / (nz * nz) } else { 1e6 });
    if feasible(hi) {
        lo = hi;
    }
    for _ in 0..opts.iterations {
        if hi - lo <= 1e-15 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let theta_f = lo;
    let c_f = match tube {
        Tube::Scalar(_) => remark_bound(tube, nq, opts.ratio, theta_f),
        Tube::Rowwise(_) => design_rowwise(tube, data.c_z, data.c_q, &t, theta_f)?,
    };
    finish(TerminalIngredients { s, t, theta_f, c_f }, data, tube)
}

/// Largest per-row `c_f` compatible with the feasibility condition.
pub fn design_rowwise(tube: &Tube, c_z: &DMatrix<f64>, c_q: &DMatrix<f64>, t: &DMatrix<f64>, theta_f: f64) -> Result<Vec<f64>> {
    let tinv = inverse(t)?;
    let (nq, nz) = (spectral_norm(&(c_q * &tinv)), two_to_inf_norm(&(c_z * &tinv)));
    let gd2 = tube.gamma_d() * tube.gamma_d();
    tube.channels()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let slack = 1.0 - nz * theta_f.sqrt();
            let c = p.alpha() / p.gamma * slack * slack - p.beta() * (gd2 + nq * nq * theta_f);
            if c < 0.0 || slack < 0.0 {
                Err(Error::InfeasibleTerminal(format!("terminal bound of row {i} would be {c:.3e}")))
            } else {
                Ok(c)
            }
        })
        .collect()
}

/// One step of the zero-input candidate from inside the terminal set:
/// returns the next state and bounds.
pub fn candidate_step(data: &TerminalData, tube: &Tube, theta: &DVector<f64>, c: &[f64]) -> (DVector<f64>, Vec<f64>) {
    let q = data.c_q * theta;
    (data.a * theta, tube.propagate(c, &q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tube::TubeParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        a: DMatrix<f64>,
        c_q: DMatrix<f64>,
        c_z: DMatrix<f64>,
        q: SymMatrix,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture {
                a: DMatrix::from_row_slice(2, 2, &[0.7, 0.2, -0.1, 0.5]),
                c_q: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                c_z: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0]),
                q: SymMatrix::identity(2),
            }
        }
        fn data(&self) -> TerminalData<'_> {
            TerminalData { a: &self.a, c_q: &self.c_q, c_z: &self.c_z, q_theta: &self.q }
        }
    }

    fn scalar(gamma: f64, mu: f64, gd: f64) -> Tube {
        Tube::Scalar(TubeParams::new(gamma, mu, 0.85, gd).unwrap())
    }

    #[test]
    fn basic_design_cases() {
        let f = Fixture::new();
        let ing = design_basic(&f.data(), &scalar(0.9, 0.5, 0.0)).unwrap();
        assert_eq!(ing.c_f, vec![0.0]);
        assert_eq!(ing.theta_f, 0.0);
        let tube = scalar(0.8, 0.5, 1.25);
        let ing = design_basic(&f.data(), &tube).unwrap();
        let rep = verify_terminal(&ing, &f.data(), &tube).unwrap();
        assert!(rep.feasibility.iter().all(|v| v.abs() < 1e-9));
        assert!(matches!(design_basic(&f.data(), &scalar(0.8, 0.5, 1.3)), Err(Error::PreconditionViolated(_))));
    }

    #[test]
    fn enlarged_region_interior_and_monotone() {
        let f = Fixture::new();
        let tube = scalar(0.8, 0.5, 0.5);
        let one = design_enlarged(&f.data(), &tube, &EnlargedOptions::default()).unwrap();
        assert!(one.theta_f > 0.0);
        let two = design_enlarged(&f.data(), &tube, &EnlargedOptions { ratio: 2.0, ..Default::default() }).unwrap();
        assert!(two.theta_f <= one.theta_f);
        let edge = design_enlarged(&f.data(), &scalar(0.8, 0.5, 1.25), &EnlargedOptions::default()).unwrap();
        assert!(edge.theta_f <= 1e-12);
    }

    #[test]
    fn rowwise_reduces_to_basic_and_duplicates_agree() {
        let f = Fixture::new();
        let p = TubeParams::new(0.8, 0.5, 0.85, 0.5).unwrap();
        let s = lyapunov_cost(&f.data()).unwrap();
        let t = crate::numerics::gram_factor(&s).unwrap();
        let row = Tube::Rowwise(vec![p, p, p]);
        let c = design_rowwise(&row, &f.c_z, &f.c_q, &t, 0.0).unwrap();
        let expect = p.alpha() / p.gamma - p.beta() * 0.25;
        assert!(c.iter().all(|&ci| (ci - expect).abs() < 1e-14));
        assert!(c[0] >= p.steady_state());
        let ing = design_enlarged(&f.data(), &row, &EnlargedOptions::default()).unwrap();
        assert!(ing.c_f.iter().all(|&ci| ci >= 0.0));
        assert!(verify_terminal(&ing, &f.data(), &row).unwrap().passes());
    }

    #[test]
    fn terminal_set_is_invariant_under_candidate() {
        let f = Fixture::new();
        let tube = scalar(0.8, 0.5, 0.5);
        let ing = design_enlarged(&f.data(), &tube, &EnlargedOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tinv = inverse(&ing.t).unwrap();
        for _ in 0..1000 {
            let v = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let v = v.normalize() * rng.random_range(0.0..1.0f64).sqrt() * ing.theta_f.sqrt();
            let theta = &tinv * v;
            let c = [ing.c_f[0] * rng.random_range(0.0..1.0)];
            let (next, cn) = candidate_step(&f.data(), &tube, &theta, &c);
            assert!((&ing.t * &next).norm_squared() <= ing.theta_f * (1.0 + 1e-12) + 1e-15);
            assert!(cn[0] <= ing.c_f[0] + 1e-12);
            let q = &f.c_q * &theta;
            let z = &f.c_z * &theta;
            for r in 0..3 {
                assert!(z[r] <= 1.0 - crate::tube::tightening_radius(c[0], &q, tube.params(0)) + 1e-9);
            }
            let dec = next.dot(&(ing.s.as_matrix() * &next)) - theta.dot(&(ing.s.as_matrix() * &theta));
            assert!(dec <= -theta.norm_squared() + 1e-9);
        }
    }
}
