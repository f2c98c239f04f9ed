//! Ground-truth closed-loop simulation. The controller sees only `y`; the
//! simulator knows the true uncertainty and disturbance and evaluates the
//! tube, estimation-bound and constraint guarantees along the run.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DeltaSpec, DisturbanceSpec, ProjectConfig, RealizationSpec};
use crate::error::{dim_err, Error, Result};
use crate::iqc::{random_lti_uncertainty, MultiplierClass, UncertaintyOperator, UncertaintyRealization};
use crate::mpc::{ControllerRuntime, NuMode, SOLUTION_TOL};
use crate::numerics::{eye, inverse, SymMatrix};
use crate::pipeline::{CertificateFile, Loop};
use crate::plant::{Filter, Plant};
use crate::tube::Tube;

/// Tolerance of the constraint, tube and estimation-bound checks.
pub const CHECK_TOL: f64 = 1e-6;

/// One fully specified run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub delta: UncertaintyRealization,
    /// One sample per step, plus a horizon's worth for look-ahead checks.
    pub disturbance: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub x_hat0: Vec<f64>,
    pub steps: usize,
    pub nu: NuMode,
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nv = v.norm();
        if nv > 1e-12 {
            return v / nv;
        }
    }
}

/// `gamma_d`-bounded disturbance samples `0..len`.
pub fn disturbance_sequence(spec: &DisturbanceSpec, n_d: usize, gamma_d: f64, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let out: Vec<DVector<f64>> = match spec {
        DisturbanceSpec::Zero => vec![DVector::zeros(n_d); len],
        DisturbanceSpec::Uniform => (0..len)
            .map(|_| {
                if n_d == 0 {
                    return DVector::zeros(0);
                }
                let r = gamma_d * rng.random::<f64>().powf(1.0 / n_d as f64);
                unit_direction(rng, n_d) * r
            })
            .collect(),
        DisturbanceSpec::ConstantExtreme => {
            let d = if n_d == 0 { DVector::zeros(0) } else { unit_direction(rng, n_d) * gamma_d };
            vec![d; len]
        }
        DisturbanceSpec::Sinusoid { period } => {
            if !(*period > 0.0) {
                return Err(Error::Config(format!("sinusoid period must be positive, got {period}")));
            }
            let phase: Vec<f64> = (0..n_d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let amp = if n_d == 0 { 0.0 } else { gamma_d / (n_d as f64).sqrt() };
            (0..len)
                .map(|t| DVector::from_fn(n_d, |i, _| amp * (std::f64::consts::TAU * t as f64 / period + phase[i]).sin()))
                .collect()
        }
        DisturbanceSpec::Sequence { values } => {
            if values.is_empty() || values.iter().any(|v| v.len() != n_d) {
                return Err(Error::Config(format!("disturbance sequence needs nonempty samples of length {n_d}")));
            }
            (0..len).map(|t| DVector::from_column_slice(&values[t % values.len()])).collect()
        }
    };
    if let Some(d) = out.iter().find(|d| d.norm() > gamma_d * (1.0 + 1e-12)) {
        return Err(Error::Config(format!("disturbance sample of norm {} exceeds gamma_d = {gamma_d}", d.norm())));
    }
    Ok(out.into_iter().map(|d| d.as_slice().to_vec()).collect())
}

/// Certified uncertainty of the given kind.
pub fn delta_realization(spec: &DeltaSpec, cfg: &ProjectConfig, rng: &mut ChaCha8Rng) -> Result<UncertaintyRealization> {
    let (nq, np) = (cfg.plant.n_q(), cfg.plant.n_p());
    let b = cfg.uncertainty.bound;
    match spec {
        DeltaSpec::Zero => Ok(UncertaintyRealization::zero(nq, np)),
        DeltaSpec::StaticExtreme => {
            let g = if nq == 1 && np == 1 {
                DMatrix::from_element(1, 1, if rng.random::<bool>() { b } else { -b })
            } else {
                let (l, r) = (unit_direction(rng, np), unit_direction(rng, nq));
                l * r.transpose() * b
            };
            UncertaintyRealization::static_gain(g, b)
        }
        DeltaSpec::RandomLti { order, fraction } => {
            if !(*fraction > 0.0 && *fraction <= 1.0) {
                return Err(Error::Config(format!("uncertainty fraction {fraction} outside (0, 1]")));
            }
            random_lti_uncertainty(rng, *order, nq, np, b, *fraction, cfg.uncertainty.rho_min)
        }
    }
}

/// Scenario of batch entry `index` (seed `first_seed + index`).
pub fn scenario(cfg: &ProjectConfig, index: usize) -> Result<ScenarioConfig> {
    let batch = &cfg.scenario;
    let spec: &RealizationSpec = &batch.realizations[index % batch.realizations.len()];
    let seed = batch.first_seed + index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = delta_realization(&spec.delta, cfg, &mut rng)?;
    let len = batch.steps + cfg.horizon;
    let mut disturbance = disturbance_sequence(&spec.disturbance, cfg.plant.n_d(), cfg.gamma_d, len, &mut rng)?;
    if let Some(t0) = batch.zero_disturbance_after {
        for d in disturbance.iter_mut().skip(t0) {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(ScenarioConfig {
        seed,
        delta,
        disturbance,
        x0: cfg.initial.x0.clone(),
        x_hat0: cfg.initial.x_hat0.clone(),
        steps: batch.steps,
        nu: batch.nu,
    })
}

/// Per-step record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub x: Vec<f64>,
    pub kappa: Vec<f64>,
    pub u: Vec<f64>,
    pub u_mpc: Vec<f64>,
    pub y: Vec<f64>,
    /// Normalized constraint values.
    pub z: Vec<f64>,
    /// Nominal prediction of `z` at `k = t`.
    pub z_nominal: Vec<f64>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub d: Vec<f64>,
    pub theta_hat: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub theta_est: Vec<f64>,
    pub c_bar: Vec<f64>,
    pub nu: f64,
    pub objective: f64,
    /// Tightening per constraint row at `k = t`.
    pub radii: Vec<f64>,
    /// Worst `error - radius` over the predictions of this step.
    pub tube_slack: f64,
    /// Worst `rhs - c_bar` of the estimation bound over channels.
    pub estimate_slack: f64,
    pub candidate_violation: Option<f64>,
    pub solve_ms: f64,
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Infeasible { t: usize, message: String },
    ConstraintViolation { t: usize, row: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub nu: NuMode,
    pub steps: Vec<StepLog>,
    pub outcome: RunOutcome,
    /// `|theta_t|` for `t = 0..=T`, from the true state.
    pub theta_norm: Vec<f64>,
    /// Largest `c_bar - alpha gamma_o (|q~|_peak^2 + gamma_d^2)` over time
    /// and channels, when the hypothesis on `c~_0` holds.
    pub steady_bound_slack: Option<f64>,
}

impl RunLog {
    pub fn tube_violations(&self) -> usize {
        self.steps.iter().filter(|s| s.tube_slack > CHECK_TOL).count()
    }

    pub fn estimate_violations(&self) -> usize {
        self.steps.iter().filter(|s| s.estimate_slack > CHECK_TOL).count()
    }

    pub fn candidate_failures(&self) -> usize {
        self.steps.iter().filter(|s| s.candidate_violation.is_some_and(|v| v > SOLUTION_TOL)).count()
    }

    pub fn max_z(&self) -> f64 {
        self.steps.iter().flat_map(|s| s.z.iter().copied()).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Infeasibilities after a feasible first step.
    pub fn late_infeasibilities(&self) -> usize {
        match self.outcome {
            RunOutcome::Infeasible { t, .. } if t > 0 => 1,
            _ => 0,
        }
    }

    /// Maps a violated guarantee to an error.
    pub fn check(&self) -> Result<()> {
        match &self.outcome {
            RunOutcome::ConstraintViolation { t, row, value } => {
                return Err(Error::ViolationFound(format!("seed {}: z[{row}] = {value} at t = {t}", self.seed)))
            }
            RunOutcome::Infeasible { t, message } if *t > 0 => {
                return Err(Error::ViolationFound(format!("seed {}: infeasible after a feasible start at t = {t}: {message}", self.seed)))
            }
            _ => {}
        }
        let (tv, ev, cf) = (self.tube_violations(), self.estimate_violations(), self.candidate_failures());
        if tv + ev + cf > 0 {
            return Err(Error::ViolationFound(format!(
                "seed {}: {tv} tube, {ev} estimation-bound and {cf} candidate violations",
                self.seed
            )));
        }
        if let Some(s) = self.steady_bound_slack {
            if s > CHECK_TOL {
                return Err(Error::ViolationFound(format!("seed {}: steady estimation bound exceeded by {s:.3e}", self.seed)));
            }
        }
        Ok(())
    }

    /// Stage cost on `[theta_hat; u_mpc]`.
    pub fn cost(&self, q_weight: &SymMatrix) -> f64 {
        self.steps.iter().map(|s| q_weight.quad_form(&stack(&s.theta_hat, &s.u_mpc))).sum()
    }

    /// Stage cost on the true `[theta; u_mpc]`.
    pub fn true_cost(&self, q_weight: &SymMatrix) -> f64 {
        self.steps
            .iter()
            .map(|s| {
                let theta: Vec<f64> = s.x.iter().chain(&s.kappa).copied().collect();
                q_weight.quad_form(&stack(&theta, &s.u_mpc))
            })
            .sum()
    }
}

fn stack(a: &[f64], b: &[f64]) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b).copied())
}

/// True plant, uncertainty and controller state.
#[derive(Debug, Clone)]
struct Truth {
    x: DVector<f64>,
    delta: UncertaintyOperator,
}

/// Resolved `(q, p)` at the current state for input `u`.
fn resolve_qp(g: &Plant, truth: &Truth, d: &DVector<f64>, u: &DVector<f64>, loop_inv: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let dd = truth.delta.feedthrough();
    let free = truth.delta.free_output();
    // q = C x + D_qp (free + D_D q) + D_qd d + D_qu u
    let q = loop_inv * (&g.c_q * &truth.x + &g.d_qp * &free + &g.d_qd * d + &g.d_qu * u);
    let p = free + dd * &q;
    (q, p)
}

/// Loop-transformed multiplier data of one estimation-bound channel.
struct BoundCheck {
    rho: f64,
    p: SymMatrix,
    m: SymMatrix,
    /// Filter state scaled by `rho^t`.
    psi: DVector<f64>,
    /// `rho^{2t} sum_{j<t} s_j' M s_j`.
    acc: f64,
}

impl BoundCheck {
    fn rhs(&self, dtheta: &DVector<f64>) -> f64 {
        self.p.quad_form(&stack(self.psi.as_slice(), dtheta.as_slice())) + self.acc
    }

    fn advance(&mut self, filter: &Filter, q: &DVector<f64>, p: &DVector<f64>) -> Result<()> {
        let (psi_next, s) = filter.step(&self.psi, q, p)?;
        let r2 = self.rho * self.rho;
        self.acc = r2 * (self.acc + self.m.quad_form(&s));
        self.psi = psi_next * self.rho;
        Ok(())
    }
}

fn bound_checks(file: &CertificateFile, class: &MultiplierClass) -> Vec<BoundCheck> {
    let mk = |a: &crate::analysis::AnalysisCertificate| BoundCheck {
        rho: a.rho,
        p: a.p.clone(),
        m: a.m(),
        psi: DVector::zeros(class.filter.n_psi()),
        acc: 0.0,
    };
    match &file.rowwise {
        Some(j) => j.rows.iter().map(|(a, _)| mk(a)).collect(),
        None => vec![mk(&file.analysis)],
    }
}

/// Simulates one scenario with the given design.
pub fn run_closed_loop(cfg: &ProjectConfig, file: &CertificateFile, sc: &ScenarioConfig) -> Result<RunLog> {
    let lp = Loop::new(cfg, &file.controller)?;
    let g = &lp.plant;
    let mut rt: ControllerRuntime = {
        let mut c = cfg.clone();
        c.initial.x_hat0 = sc.x_hat0.clone();
        file.runtime(&c, cfg.horizon, sc.nu)?
    };
    if sc.x0.len() != g.n_x() || sc.disturbance.len() < sc.steps + cfg.horizon {
        return dim_err("scenario initial state or disturbance length mismatch");
    }
    if sc.delta.n_q() != g.n_q() || sc.delta.n_p() != g.n_p() {
        return dim_err("uncertainty size does not match the plant");
    }
    let dseq: Vec<DVector<f64>> = sc.disturbance.iter().map(|d| DVector::from_column_slice(d)).collect();
    let mut truth = Truth { x: DVector::from_column_slice(&sc.x0), delta: sc.delta.operator() };
    let loop_inv = inverse(&(eye(g.n_q()) - &g.d_qp * truth.delta.feedthrough()))?;
    let mut checks = bound_checks(file, &lp.class);
    let tube = file.tube.clone();
    let horizon = cfg.horizon;
    let gd = cfg.gamma_d;
    let mut steps = Vec::with_capacity(sc.steps);
    let mut theta_norm = Vec::with_capacity(sc.steps + 1);
    let mut q_tilde_peak: f64 = 0.0;
    let mut c_bar_hist: Vec<Vec<f64>> = Vec::new();
    let mut outcome = RunOutcome::Completed;
    for t in 0..sc.steps {
        let kappa = rt.kappa.clone();
        let theta = stack(truth.x.as_slice(), kappa.as_slice());
        theta_norm.push(theta.norm());
        let d = &dseq[t];
        // D_yp p_t does not depend on u_t, so y is formed with u = 0
        let zero_u = DVector::zeros(g.n_u());
        let (_, p0) = resolve_qp(g, &truth, d, &zero_u, &loop_inv);
        let y = &g.c_y * &truth.x + &g.d_yp * &p0 + &g.d_yd * d;
        let theta_tilde = rt.est.theta_tilde.clone();
        let started = Instant::now();
        let rec = match rt.step(&y) {
            Ok(r) => r,
            Err(e @ (Error::Infeasible(_) | Error::NumericalFailure(_))) => {
                outcome = RunOutcome::Infeasible { t, message: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        };
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;
        let q_tilde = &rt.setup.model.c_q * &theta_tilde + &rt.setup.model.d_qu * &rec.u_mpc;
        q_tilde_peak = q_tilde_peak.max(q_tilde.norm_squared());
        c_bar_hist.push(rec.c_bar.clone());

        // estimation bound from ground truth
        let dtheta_est = &theta - &rec.theta_est;
        let estimate_slack = checks
            .iter()
            .zip(&rec.c_bar)
            .map(|(ch, &cb)| ch.rhs(&dtheta_est) - cb)
            .fold(f64::NEG_INFINITY, f64::max);

        // tube: replay the true system under the planned inputs
        let mut shadow = truth.clone();
        let mut shadow_kappa = kappa.clone();
        let mut tube_slack = f64::NEG_INFINITY;
        let pred = &rec.prediction;
        for k in 0..horizon {
            let dk = &dseq[t + k];
            let yk = {
                let (_, pk0) = resolve_qp(g, &shadow, dk, &zero_u, &loop_inv);
                &g.c_y * &shadow.x + &g.d_yp * &pk0 + &g.d_yd * dk
            };
            let u_plan = if k == 0 { rec.u_mpc.clone() } else { rt.previous.as_ref().expect("solution stored").u[k].clone() };
            let (kn, ufb) = rt.controller.step(&shadow_kappa, &yk)?;
            let uk = ufb + &u_plan;
            let (qk, pk) = resolve_qp(g, &shadow, dk, &uk, &loop_inv);
            let step = g.step(&shadow.x, &pk, dk, &uk)?;
            let dz = &step.z - &pred.z[k];
            let slack = match &tube {
                Tube::Scalar(_) => dz.norm() - pred.radii[k][0],
                Tube::Rowwise(_) => dz.iter().zip(&pred.radii[k]).map(|(e, r)| e.abs() - r).fold(f64::NEG_INFINITY, f64::max),
            };
            tube_slack = tube_slack.max(slack);
            shadow.delta.step(&qk);
            shadow.x = step.x_next;
            shadow_kappa = kn;
        }

        // true step
        let (q, p) = resolve_qp(g, &truth, d, &rec.u, &loop_inv);
        let step = g.step(&truth.x, &p, d, &rec.u)?;
        for ch in checks.iter_mut() {
            ch.advance(&lp.class.filter, &q, &p)?;
        }
        truth.delta.step(&q);
        let vec = |v: &DVector<f64>| v.as_slice().to_vec();
        steps.push(StepLog {
            t,
            x: vec(&truth.x),
            kappa: vec(&kappa),
            u: vec(&rec.u),
            u_mpc: vec(&rec.u_mpc),
            y: vec(&y),
            z: vec(&step.z),
            z_nominal: vec(&rec.prediction.z[0]),
            q: vec(&q),
            p: vec(&p),
            d: vec(d),
            theta_hat: vec(&rec.theta_hat),
            c_hat: rec.c_hat.clone(),
            theta_est: vec(&rec.theta_est),
            c_bar: rec.c_bar.clone(),
            nu: rec.nu,
            objective: rec.objective,
            radii: rec.radii.clone(),
            tube_slack,
            estimate_slack,
            candidate_violation: rec.candidate_violation,
            solve_ms,
        });
        if let Some((row, &value)) = step.z.iter().enumerate().find(|(_, &v)| v > 1.0 + CHECK_TOL) {
            outcome = RunOutcome::ConstraintViolation { t, row, value };
            break;
        }
        truth.x = step.x_next;
    }
    if matches!(outcome, RunOutcome::Completed) {
        theta_norm.push(stack(truth.x.as_slice(), rt.kappa.as_slice()).norm());
    }
    let steady_bound_slack = steady_slack(file, &c_bar_hist, q_tilde_peak, gd);
    Ok(RunLog { seed: sc.seed, nu: sc.nu, steps, outcome, theta_norm, steady_bound_slack })
}

/// Worst excess of `c_bar` over its steady bound, or `None` when the
/// hypothesis on the initial bound fails.
fn steady_slack(file: &CertificateFile, c_bar: &[Vec<f64>], q_peak: f64, gamma_d: f64) -> Option<f64> {
    let w = q_peak + gamma_d * gamma_d;
    let mut worst = f64::NEG_INFINITY;
    for (i, ch) in file.channels.iter().enumerate() {
        let alpha = crate::analysis::alpha_of(ch.rho);
        if file.c_tilde0[i] > alpha * ch.mu_o * w {
            return None;
        }
        let gamma_o = ch.mu_o + ch.beta_o / alpha;
        for cb in c_bar {
            worst = worst.max(cb[i] - alpha * gamma_o * w);
        }
    }
    Some(worst)
}

/// All scenarios of the configured batch, in seed order.
pub fn run_batch(cfg: &ProjectConfig, file: &CertificateFile) -> Result<Vec<RunLog>> {
    (0..cfg.scenario.seeds)
        .into_par_iter()
        .map(|i| scenario(cfg, i).and_then(|sc| run_closed_loop(cfg, file, &sc)))
        .collect()
}

/// Summary metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub nu: NuMode,
    pub steps: usize,
    pub cost: f64,
    pub true_cost: f64,
    pub x1_at_report: Option<f64>,
    pub max_z: f64,
    pub feasible_start: bool,
    pub late_infeasibilities: usize,
    pub tube_violations: usize,
    pub estimate_violations: usize,
    pub candidate_failures: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub mean_nu: f64,
}

/// Summary of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub report_time: usize,
    pub runs: Vec<RunSummary>,
    pub mean_cost: Option<f64>,
    pub mean_solve_ms: Option<f64>,
    pub infeasible_starts: usize,
    pub late_infeasibilities: usize,
    pub violations: usize,
}

pub fn summarize_run(log: &RunLog, q_weight: &SymMatrix, report_time: usize) -> RunSummary {
    let times: Vec<f64> = log.steps.iter().map(|s| s.solve_ms).collect();
    let n = times.len().max(1) as f64;
    RunSummary {
        seed: log.seed,
        nu: log.nu,
        steps: log.steps.len(),
        cost: log.cost(q_weight),
        true_cost: log.true_cost(q_weight),
        x1_at_report: log.steps.get(report_time).and_then(|s| s.x.first().copied()),
        max_z: log.max_z(),
        feasible_start: !matches!(log.outcome, RunOutcome::Infeasible { t: 0, .. }),
        late_infeasibilities: log.late_infeasibilities(),
        tube_violations: log.tube_violations(),
        estimate_violations: log.estimate_violations(),
        candidate_failures: log.candidate_failures(),
        mean_solve_ms: times.iter().sum::<f64>() / n,
        max_solve_ms: times.iter().copied().fold(0.0, f64::max),
        mean_nu: log.steps.iter().map(|s| s.nu).sum::<f64>() / log.steps.len().max(1) as f64,
    }
}

pub fn summarize(logs: &[RunLog], q_weight: &SymMatrix, report_time: usize) -> BatchSummary {
    let runs: Vec<RunSummary> = logs.iter().map(|l| summarize_run(l, q_weight, report_time)).collect();
    let mean = |f: &dyn Fn(&RunSummary) -> f64| {
        if runs.is_empty() {
            None
        } else {
            Some(runs.iter().map(f).sum::<f64>() / runs.len() as f64)
        }
    };
    BatchSummary {
        report_time,
        mean_cost: mean(&|r| r.cost),
        mean_solve_ms: mean(&|r| r.mean_solve_ms),
        infeasible_starts: runs.iter().filter(|r| !r.feasible_start).count(),
        late_infeasibilities: runs.iter().map(|r| r.late_infeasibilities).sum(),
        violations: logs.iter().filter(|l| l.check().is_err()).count(),
        runs,
    }
}

/// Column names of the per-step CSV for the given sizes.
pub fn csv_header(log: &RunLog) -> Vec<String> {
    let Some(s) = log.steps.first() else { return vec!["t".into()] };
    let mut h = vec!["t".to_string()];
    let mut add = |name: &str, n: usize| h.extend((0..n).map(|i| format!("{name}{i}")));
    add("x", s.x.len());
    add("kappa", s.kappa.len());
    add("u", s.u.len());
    add("u_mpc", s.u_mpc.len());
    add("y", s.y.len());
    add("z", s.z.len());
    add("z_nominal", s.z_nominal.len());
    add("q", s.q.len());
    add("p", s.p.len());
    add("d", s.d.len());
    add("theta_hat", s.theta_hat.len());
    add("c_hat", s.c_hat.len());
    add("theta_est", s.theta_est.len());
    add("c_bar", s.c_bar.len());
    add("radius", s.radii.len());
    h.extend(["nu", "objective", "tube_slack", "estimate_slack", "candidate_violation", "solve_ms"].map(String::from));
    h
}

/// Writes one CSV row per step.
pub fn write_csv<W: std::io::Write>(log: &RunLog, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(csv_header(log))?;
    for s in &log.steps {
        let mut row = vec![s.t.to_string()];
        for v in [&s.x, &s.kappa, &s.u, &s.u_mpc, &s.y, &s.z, &s.z_nominal, &s.q, &s.p, &s.d, &s.theta_hat, &s.c_hat, &s.theta_est, &s.c_bar, &s.radii] {
            row.extend(v.iter().map(|x| x.to_string()));
        }
        row.push(s.nu.to_string());
        row.push(s.objective.to_string());
        row.push(s.tube_slack.to_string());
        row.push(s.estimate_slack.to_string());
        row.push(s.candidate_violation.map(|v| v.to_string()).unwrap_or_default());
        row.push(s.solve_ms.to_string());
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synthesize;
    use std::sync::OnceLock;

    fn design() -> &'static (ProjectConfig, CertificateFile) {
        static CELL: OnceLock<(ProjectConfig, CertificateFile)> = OnceLock::new();
        CELL.get_or_init(|| {
            let mut cfg = ProjectConfig::example();
            cfg.scenario.steps = 8;
            let file = synthesize(&cfg).unwrap();
            (cfg, file)
        })
    }

    #[test]
    fn resting_loop_stays_at_rest() {
        let (cfg, file) = design();
        let mut cfg = cfg.clone();
        cfg.initial.x0 = vec![0.0, 0.0];
        cfg.initial.x_hat0 = vec![0.0, 0.0];
        let mut sc = scenario(&cfg, 0).unwrap();
        sc.delta = UncertaintyRealization::zero(1, 1);
        sc.disturbance.iter_mut().flatten().for_each(|v| *v = 0.0);
        let log = run_closed_loop(&cfg, file, &sc).unwrap();
        assert_eq!(log.outcome, RunOutcome::Completed);
        for s in &log.steps {
            assert!(s.x.iter().chain(&s.u).all(|v| v.abs() < 1e-7), "t = {}: x {:?} u {:?}", s.t, s.x, s.u);
        }
        log.check().unwrap();
    }

    #[test]
    fn runs_are_reproducible() {
        let (cfg, file) = design();
        let a = run_closed_loop(cfg, file, &scenario(cfg, 1).unwrap()).unwrap();
        let b = run_closed_loop(cfg, file, &scenario(cfg, 1).unwrap()).unwrap();
        let strip = |l: &RunLog| l.steps.iter().map(|s| (s.x.clone(), s.u.clone(), s.nu)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.steps.len(), cfg.scenario.steps);
        a.check().unwrap();
    }

    #[test]
    fn disturbances_respect_the_peak_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in [DisturbanceSpec::Uniform, DisturbanceSpec::ConstantExtreme, DisturbanceSpec::Sinusoid { period: 7.0 }] {
            let d = disturbance_sequence(&spec, 3, 0.2, 200, &mut rng).unwrap();
            assert_eq!(d.len(), 200);
            assert!(d.iter().all(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt() <= 0.2 + 1e-12));
        }
        let d = disturbance_sequence(&DisturbanceSpec::ConstantExtreme, 2, 0.2, 5, &mut rng).unwrap();
        assert!((d[4].iter().map(|x| x * x).sum::<f64>().sqrt() - 0.2).abs() < 1e-12);
        let bad = DisturbanceSpec::Sequence { values: vec![vec![0.3]] };
        assert!(matches!(disturbance_sequence(&bad, 1, 0.2, 3, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let (cfg, file) = design();
        let log = run_closed_loop(cfg, file, &scenario(cfg, 2).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), log.steps.len() + 1);
        let width = csv_header(&log).len();
        assert!(lines.iter().all(|l| l.split(',').count() == width));
        assert!(lines[0].starts_with("t,x0,x1,u0,u_mpc0,y0,y1,z0"));
    }
}
