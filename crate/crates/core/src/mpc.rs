//! Receding-horizon tube MPC: the fixed-interpolation conic program, the
//! outer search over the interpolation weight and the online controller.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::estimator::{BoundChannel, EstimatorRunState, NominalModel, ProjectionPair};
use crate::numerics::search::{best_prefer_larger, golden_section};
use crate::numerics::{AffineMatrix, ConicProgram, ConicSettings, SymMatrix};
use crate::plant::{Controller, Estimator};
use crate::terminal::TerminalIngredients;
use crate::tube::{interpolate, Tube};

/// Constraint slack accepted at a returned solution.
pub const SOLUTION_TOL: f64 = 1e-6;

/// Iterations of the golden-section search over `nu`.
pub const NU_ITERATIONS: usize = 6;

/// How the interpolation weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuMode {
    /// Always trust the prediction.
    Fixed1,
    /// Golden-section search on `[0, 1]` plus both endpoints.
    Optimize,
    /// Dense grid with the given number of points, for cross-checking.
    Grid(usize),
}

/// Offline data of the MPC problem.
#[derive(Debug, Clone)]
pub struct MpcSetup {
    pub model: NominalModel,
    pub tube: Tube,
    pub terminal: TerminalIngredients,
    /// Stage weight on `[theta; u]`.
    pub q_weight: SymMatrix,
    pub horizon: usize,
    pub settings: ConicSettings,
}

impl MpcSetup {
    pub fn new(model: NominalModel, tube: Tube, terminal: TerminalIngredients, q_weight: SymMatrix, horizon: usize) -> Result<Self> {
        let (nt, nu) = (model.n_theta(), model.n_u());
        if horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if q_weight.dim() != nt + nu || terminal.s.dim() != nt || terminal.c_f.len() != tube.n_channels() {
            return dim_err("MPC weights or terminal ingredients do not match the model");
        }
        if let Tube::Rowwise(v) = &tube {
            if v.len() != model.c_z.nrows() {
                return dim_err("componentwise tube needs one channel per constraint row");
            }
        }
        Ok(MpcSetup { model, tube, terminal, q_weight, horizon, settings: ConicSettings::default() })
    }

    pub fn n_rows(&self) -> usize {
        self.model.c_z.nrows()
    }
}

/// Initial data of one solve: prediction from the previous step and the
/// current estimate, each with per-channel bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpProblem {
    pub pred_theta: DVector<f64>,
    pub pred_c: Vec<f64>,
    pub est_theta: DVector<f64>,
    pub est_c: Vec<f64>,
}

/// Forward recursion of the nominal and tube dynamics for given inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub theta: Vec<DVector<f64>>,
    pub q: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    /// `c[k][channel]`, `k = 0..=N`.
    pub c: Vec<Vec<f64>>,
    /// Tightening per step and row, `k = 0..N`.
    pub radii: Vec<Vec<f64>>,
    pub objective: f64,
    /// Largest constraint violation (negative when strictly feasible).
    pub violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    pub u: Vec<DVector<f64>>,
    pub nu: f64,
    pub rollout: Rollout,
    pub status: String,
}

impl OcpSolution {
    pub fn objective(&self) -> f64 {
        self.rollout.objective
    }

    /// Previous inputs shifted by one with a zero input appended.
    pub fn shifted_inputs(&self) -> Vec<DVector<f64>> {
        let nu = self.u[0].len();
        let mut u: Vec<DVector<f64>> = self.u[1..].to_vec();
        u.push(DVector::zeros(nu));
        u
    }
}

/// Simulates the nominal and tube dynamics from `(theta0, c0)` and measures
/// the constraint violations.
pub fn rollout(setup: &MpcSetup, theta0: &DVector<f64>, c0: &[f64], u: &[DVector<f64>]) -> Result<Rollout> {
    let m = &setup.model;
    if u.len() != setup.horizon || theta0.len() != m.n_theta() || c0.len() != setup.tube.n_channels() {
        return dim_err("rollout inputs do not match the MPC setup");
    }
    let n = setup.horizon;
    let mut theta = vec![theta0.clone()];
    let mut c = vec![c0.to_vec()];
    let (mut q, mut z, mut radii) = (Vec::new(), Vec::new(), Vec::new());
    let mut objective = 0.0;
    let mut violation = f64::NEG_INFINITY;
    for (k, uk) in u.iter().enumerate().take(n) {
        let th = &theta[k];
        let qk = &m.c_q * th + &m.d_qu * uk;
        let zk = &m.c_z * th + &m.d_zu * uk;
        let rk = setup.tube.radii(&c[k], &qk, setup.n_rows());
        for (zr, rr) in zk.iter().zip(&rk) {
            violation = violation.max(zr - (1.0 - rr));
        }
        let stacked = DVector::from_iterator(th.len() + uk.len(), th.iter().chain(uk.iter()).copied());
        objective += setup.q_weight.quad_form(&stacked);
        c.push(setup.tube.propagate(&c[k], &qk));
        theta.push(&m.a * th + &m.b_u * uk);
        q.push(qk);
        z.push(zk);
        radii.push(rk);
    }
    let tn = &theta[n];
    objective += setup.terminal.s.quad_form(tn);
    let t = &setup.terminal;
    violation = violation.max((&t.t * tn).norm_squared() - t.theta_f);
    for (cn, cf) in c[n].iter().zip(&t.c_f) {
        violation = violation.max(cn - cf);
    }
    Ok(Rollout { theta, q, z, c, radii, objective, violation })
}

/// Row tightening per prediction step used by the solver.
pub const BACKOFF_STEP: f64 = 2e-7;

/// Solver-side margin on the constraints at prediction step `k`. It grows
/// along the horizon, so a plan that is active up to solver accuracy at
/// step `k + 1` keeps a margin of `BACKOFF_STEP` once shifted to step `k`.
pub fn backoff(k: usize) -> f64 {
    BACKOFF_STEP * k as f64
}

/// Solves the MPC problem with the interpolation weight fixed to `nu`.
pub fn solve_fixed_nu(setup: &MpcSetup, problem: &OcpProblem, nu: f64) -> Result<OcpSolution> {
    let (theta0, c0) = interpolate((&problem.pred_theta, &problem.pred_c[..]), (&problem.est_theta, &problem.est_c[..]), nu)?;
    let m = &setup.model;
    let n = setup.horizon;
    let (nt, nuu) = (m.n_theta(), m.n_u());
    let mut prog = ConicProgram::with_settings(setup.settings);
    let u: Vec<AffineMatrix> = (0..n).map(|_| prog.matrix(nuu, 1)).collect();
    // states and uncertainty inputs are lifted to variables so that every
    // constraint stays sparse in the horizon
    let mut theta = vec![AffineMatrix::from(DMatrix::from_column_slice(nt, 1, theta0.as_slice()))];
    for (k, uk) in u.iter().enumerate() {
        let next = prog.matrix(nt, 1);
        prog.zero(&next.sub(&theta[k].mul_left(&m.a).add(&uk.mul_left(&m.b_u))));
        theta.push(next);
    }
    let q: Vec<AffineMatrix> = (0..n)
        .map(|k| {
            let qk = prog.matrix(m.c_q.nrows(), 1);
            prog.zero(&qk.sub(&theta[k].mul_left(&m.c_q).add(&u[k].mul_left(&m.d_qu))));
            qk
        })
        .collect();
    let tube = &setup.tube;
    let gd = tube.gamma_d();
    let one = |v: f64| AffineMatrix::scalar(v);

    // sigma_k >= sqrt(c_k) per channel via
    // sigma_{k+1} >= rho |[sigma_k; sqrt(mu) q_k; sqrt(mu) gamma_d]|
    let mut sigma: Vec<Vec<AffineMatrix>> = Vec::with_capacity(tube.n_channels());
    for ch in 0..tube.n_channels() {
        let p = tube.params(ch);
        let sm = p.mu.sqrt();
        let mut s = vec![one(c0[ch].max(0.0).sqrt())];
        for k in 0..n {
            let next = prog.scalar();
            let body = AffineMatrix::vstack(&[s[k].clone(), q[k].scale(sm), one(sm * gd)]).scale(p.rho);
            prog.soc(&next, &body);
            s.push(next);
        }
        sigma.push(s);
    }
    for k in 0..n {
        let zk = theta[k].mul_left(&m.c_z).add(&u[k].mul_left(&m.d_zu));
        for r in 0..setup.n_rows() {
            let ch = tube.channel_of_row(r);
            let p = tube.params(ch);
            let sb = p.beta().max(0.0).sqrt();
            let body = AffineMatrix::vstack(&[sigma[ch][k].clone(), q[k].scale(sb), one(sb * gd)]).scale((p.gamma / p.alpha()).sqrt());
            let rhs = zk.sub_matrix(r, 0, 1, 1).scale(-1.0).add_const(&DMatrix::from_element(1, 1, 1.0 - backoff(k)));
            prog.soc(&rhs, &body);
        }
    }
    let t = &setup.terminal;
    let tn = theta[n].mul_left(&t.t);
    if t.theta_f > 0.0 {
        prog.soc(&one(t.theta_f.sqrt()), &tn);
    } else {
        prog.zero(&tn);
    }
    for (ch, &cf) in t.c_f.iter().enumerate() {
        prog.nonneg(&sigma[ch][n].scale(-1.0).add_const(&DMatrix::from_element(1, 1, cf.max(0.0).sqrt())));
    }
    for k in 0..n {
        prog.add_weighted_square(&AffineMatrix::vstack(&[theta[k].clone(), u[k].clone()]), setup.q_weight.as_matrix());
    }
    prog.add_weighted_square(&theta[n], t.s.as_matrix());
    let sol = prog.solve()?;
    let u_val: Vec<DVector<f64>> = u.iter().map(|uk| sol.value(uk).column(0).into_owned()).collect();
    let ro = rollout(setup, &theta0, &c0, &u_val)?;
    if ro.violation > SOLUTION_TOL {
        return Err(Error::NumericalFailure(format!("MPC solution violates its constraints by {:.3e}", ro.violation)));
    }
    Ok(OcpSolution { u: u_val, nu, rollout: ro, status: sol.status })
}

/// Relative tolerance under which objectives count as tied.
const TIE_TOL: f64 = 1e-9;

/// Solves the MPC problem, choosing `nu` according to `mode`. Ties are
/// broken toward larger `nu`.
pub fn solve(setup: &MpcSetup, problem: &OcpProblem, mode: NuMode) -> Result<OcpSolution> {
    let mut solved: Vec<OcpSolution> = Vec::new();
    let mut last_err = None;
    let mut eval = |nu: f64| -> f64 {
        match solve_fixed_nu(setup, problem, nu) {
            Ok(s) => {
                let j = s.objective();
                solved.push(s);
                j
            }
            Err(e) => {
                last_err = Some(e);
                f64::INFINITY
            }
        }
    };
    match mode {
        NuMode::Fixed1 => {
            eval(1.0);
        }
        NuMode::Optimize => {
            eval(1.0);
            eval(0.0);
            golden_section(0.0, 1.0, NU_ITERATIONS, &mut eval);
        }
        NuMode::Grid(points) => {
            let points = points.max(2);
            for i in 0..points {
                eval(i as f64 / (points - 1) as f64);
            }
        }
    }
    let history: Vec<(f64, f64)> = solved.iter().map(|s| (s.nu, s.objective())).collect();
    match best_prefer_larger(&history, TIE_TOL) {
        Some((nu, _)) => Ok(solved.into_iter().find(|s| s.nu == nu).expect("history entry has a solution")),
        None => Err(last_err.unwrap_or_else(|| Error::Infeasible("no interpolation weight is feasible".into()))),
    }
}

/// Per-step record of the online controller.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub u: DVector<f64>,
    pub u_mpc: DVector<f64>,
    pub nu: f64,
    pub theta_hat: DVector<f64>,
    pub c_hat: Vec<f64>,
    pub theta_est: DVector<f64>,
    pub c_bar: Vec<f64>,
    pub objective: f64,
    /// Tightening of each row at `k = t`.
    pub radii: Vec<f64>,
    /// Violation of the shifted candidate with `nu = 1`, if a previous
    /// solution exists.
    pub candidate_violation: Option<f64>,
    /// Predictions `(theta, q, c)` of this solve for `k = t..=t+N`.
    pub prediction: Rollout,
}

/// Online state: controller, estimator, bound recursions and the prediction
/// carried between steps.
#[derive(Debug, Clone)]
pub struct ControllerRuntime {
    pub setup: MpcSetup,
    pub controller: Controller,
    pub estimator: Estimator,
    pub projection: ProjectionPair,
    pub channels: Vec<BoundChannel>,
    pub mode: NuMode,
    pub kappa: DVector<f64>,
    pub est: EstimatorRunState,
    pub pred_theta: DVector<f64>,
    pub pred_c: Vec<f64>,
    pub previous: Option<OcpSolution>,
    pub t: usize,
}

impl ControllerRuntime {
    /// `theta_hat0` is the initial prediction `[x_hat0; 0]`; `c_hat0` and
    /// `c_tilde0` the initial bounds per channel.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        setup: MpcSetup,
        controller: Controller,
        estimator: Estimator,
        channels: Vec<BoundChannel>,
        mode: NuMode,
        theta_hat0: DVector<f64>,
        c_hat0: Vec<f64>,
        c_tilde0: Vec<f64>,
    ) -> Result<Self> {
        let n_ch = setup.tube.n_channels();
        if channels.len() != n_ch || c_hat0.len() != n_ch || c_tilde0.len() != n_ch {
            return dim_err("bound channel counts differ between tube and estimator");
        }
        if theta_hat0.len() != setup.model.n_theta() {
            return dim_err("initial prediction has the wrong length");
        }
        let projection = ProjectionPair::new(&setup.model.d_qu, &setup.model.c_q)?;
        let est = EstimatorRunState::new(theta_hat0.clone(), estimator.n_lambda(), c_tilde0);
        Ok(ControllerRuntime {
            kappa: DVector::zeros(controller.n_kappa()),
            setup,
            controller,
            estimator,
            projection,
            channels,
            mode,
            est,
            pred_theta: theta_hat0,
            pred_c: c_hat0,
            previous: None,
            t: 0,
        })
    }

    /// One online step from the measurement `y`; returns the applied input.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<StepRecord> {
        let gamma_d = self.setup.tube.gamma_d();
        let est = self.est.estimate(y, &self.estimator, &self.setup.model, &self.projection, &self.channels, gamma_d)?;
        let problem = OcpProblem {
            pred_theta: self.pred_theta.clone(),
            pred_c: self.pred_c.clone(),
            est_theta: est.theta.clone(),
            est_c: est.c_bar.clone(),
        };
        let candidate_violation = match &self.previous {
            Some(prev) => Some(rollout(&self.setup, &self.pred_theta, &self.pred_c, &prev.shifted_inputs())?.violation),
            None => None,
        };
        let sol = solve(&self.setup, &problem, self.mode).map_err(|e| match e {
            Error::Infeasible(msg) | Error::NumericalFailure(msg) => Error::Infeasible(format!(
                "MPC infeasible at t = {}: {msg}; prediction {:?} / {:?}, estimate {:?} / {:?}",
                self.t,
                problem.pred_theta.as_slice(),
                problem.pred_c,
                problem.est_theta.as_slice(),
                problem.est_c
            )),
            other => other,
        })?;
        let u_mpc = sol.u[0].clone();
        let (kappa_next, u_fb) = self.controller.step(&self.kappa, y)?;
        let u = u_fb + &u_mpc;
        self.kappa = kappa_next;
        self.est.advance(&u_mpc, &self.setup.model, &self.channels, gamma_d)?;
        let ro = &sol.rollout;
        let record = StepRecord {
            u,
            u_mpc,
            nu: sol.nu,
            theta_hat: ro.theta[0].clone(),
            c_hat: ro.c[0].clone(),
            theta_est: est.theta,
            c_bar: est.c_bar,
            objective: ro.objective,
            radii: ro.radii[0].clone(),
            candidate_violation,
            prediction: ro.clone(),
        };
        self.pred_theta = ro.theta[1].clone();
        self.pred_c = ro.c[1].clone();
        self.previous = Some(sol);
        self.t += 1;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terminal::{design_enlarged, EnlargedOptions, TerminalData};
    use crate::tube::TubeParams;
    use crate::numerics::{eye, zeros};

    fn scalar_setup(n: usize, gamma_d: f64) -> MpcSetup {
        let model = NominalModel {
            a: DMatrix::from_element(1, 1, 0.9),
            b_u: DMatrix::from_element(1, 1, 1.0),
            c_y: eye(1),
            c_q: DMatrix::from_element(1, 1, 0.5),
            d_qu: zeros(1, 1),
            c_z: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            d_zu: zeros(2, 1),
        };
        let tube = Tube::Scalar(TubeParams::new(0.8, 0.6, 0.9, gamma_d).unwrap());
        let q = SymMatrix::identity(1);
        let data = TerminalData { a: &model.a, c_q: &model.c_q, c_z: &model.c_z, q_theta: &q };
        let terminal = design_enlarged(&data, &tube, &EnlargedOptions::default()).unwrap();
        MpcSetup::new(model, tube, terminal, SymMatrix::identity(2), n).unwrap()
    }

    fn problem(theta: f64, c: f64) -> OcpProblem {
        OcpProblem {
            pred_theta: DVector::from_element(1, theta),
            pred_c: vec![c],
            est_theta: DVector::from_element(1, theta),
            est_c: vec![c],
        }
    }

    #[test]
    fn origin_is_optimal_at_rest() {
        let setup = scalar_setup(5, 0.0);
        let sol = solve_fixed_nu(&setup, &problem(0.0, 0.0), 1.0).unwrap();
        assert!(sol.u.iter().all(|u| u.amax() < 1e-6));
        assert!(sol.objective() < 1e-9);
    }

    #[test]
    fn one_step_matches_grid_search() {
        let setup = scalar_setup(1, 0.1);
        let p = problem(0.4, 0.01);
        let sol = solve_fixed_nu(&setup, &p, 1.0).unwrap();
        let mut best = f64::INFINITY;
        for i in 0..=400_000 {
            let u = -2.0 + 4.0 * i as f64 / 400_000.0;
            let ro = rollout(&setup, &p.pred_theta, &p.pred_c, &[DVector::from_element(1, u)]).unwrap();
            if ro.violation <= 0.0 {
                best = best.min(ro.objective);
            }
        }
        assert!((sol.objective() - best).abs() <= 1e-4, "{} vs {best}", sol.objective());
    }

    #[test]
    fn rollout_reproduces_solver_prediction() {
        let setup = scalar_setup(6, 0.1);
        let p = problem(0.5, 0.02);
        let sol = solve_fixed_nu(&setup, &p, 1.0).unwrap();
        let again = rollout(&setup, &p.pred_theta, &p.pred_c, &sol.u).unwrap();
        for (a, b) in again.c.iter().zip(&sol.rollout.c) {
            assert!((a[0] - b[0]).abs() <= 1e-7);
        }
        assert!(sol.rollout.violation <= SOLUTION_TOL);
    }

    #[test]
    fn degenerate_interpolation_prefers_prediction() {
        let setup = scalar_setup(5, 0.1);
        let sol = solve(&setup, &problem(0.5, 0.02), NuMode::Optimize).unwrap();
        assert_eq!(sol.nu, 1.0);
    }

    #[test]
    fn tighter_estimate_is_used() {
        let setup = scalar_setup(5, 0.1);
        let p = OcpProblem { est_c: vec![0.0], ..problem(0.6, 0.3) };
        let opt = solve(&setup, &p, NuMode::Optimize).unwrap();
        let one = solve(&setup, &p, NuMode::Fixed1).unwrap();
        assert!(opt.objective() <= one.objective() + 1e-9);
        let zero = solve_fixed_nu(&setup, &p, 0.0).unwrap();
        assert!(zero.objective() <= one.objective() + 1e-9);
    }

    #[test]
    fn shifted_candidate_is_feasible() {
        let setup = scalar_setup(6, 0.1);
        let p = problem(0.7, 0.05);
        let sol = solve_fixed_nu(&setup, &p, 1.0).unwrap();
        let next_theta = sol.rollout.theta[1].clone();
        let next_c = sol.rollout.c[1].clone();
        let cand = rollout(&setup, &next_theta, &next_c, &sol.shifted_inputs()).unwrap();
        assert!(cand.violation <= SOLUTION_TOL, "{}", cand.violation);
        assert!(cand.objective <= sol.objective() - setup.q_weight.quad_form(&DVector::from_row_slice(&[0.7, sol.u[0][0]])) + 1e-6);
    }
}
