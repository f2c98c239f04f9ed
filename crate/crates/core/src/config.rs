//! Project configuration: the JSON document read by the pipeline and the
//! compilation of interval constraints into normalized one-sided rows.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{BootstrapOptions, RhoSearch};
use crate::error::{Error, Result};
use crate::example::{two_state_bounds, two_state_plant, RHO_MIN, UNCERTAINTY_BOUND};
use crate::mpc::NuMode;
use crate::numerics::serde_mat;
use crate::numerics::{ConicSettings, SymMatrix, DEFAULT_STRICT_EPS};
use crate::plant::{Controller, Plant};
use crate::terminal::EnlargedOptions;

/// Bounds on one raw constraint signal. A missing side is unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// One normalized row `z_raw[source] / bound <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRow {
    pub source: usize,
    /// The original bound; negative for lower bounds.
    pub bound: f64,
}

/// Compiles intervals into one-sided rows. Bounds must have the origin
/// strictly inside.
pub fn normalize_rows(intervals: &[Interval]) -> Result<Vec<NormalizedRow>> {
    let mut rows = Vec::new();
    for (i, iv) in intervals.iter().enumerate() {
        if let Some(hi) = iv.upper {
            if !(hi > 0.0 && hi.is_finite()) {
                return Err(Error::Config(format!("upper bound of constraint {i} must be positive, got {hi}")));
            }
            rows.push(NormalizedRow { source: i, bound: hi });
        }
        if let Some(lo) = iv.lower {
            if !(lo < 0.0 && lo.is_finite()) {
                return Err(Error::Config(format!("lower bound of constraint {i} must be negative, got {lo}")));
            }
            rows.push(NormalizedRow { source: i, bound: lo });
        }
    }
    if rows.is_empty() {
        return Err(Error::Config("no constraint rows".into()));
    }
    Ok(rows)
}

/// Plant whose constraint output is the normalized stack of rows.
pub fn normalized_plant(raw: &Plant, rows: &[NormalizedRow]) -> Result<Plant> {
    if let Some(r) = rows.iter().find(|r| r.source >= raw.n_z()) {
        return Err(Error::Config(format!("constraint row refers to signal {} of {}", r.source, raw.n_z())));
    }
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i].source, j)] / rows[i].bound);
    Ok(Plant { c_z: pick(&raw.c_z), d_zp: pick(&raw.d_zp), d_zd: pick(&raw.d_zd), d_zu: pick(&raw.d_zu), ..raw.clone() })
}

/// Maps normalized constraint values back to raw signal values.
pub fn denormalize(z: &DVector<f64>, rows: &[NormalizedRow]) -> Vec<(usize, f64)> {
    z.iter().zip(rows).map(|(v, r)| (r.source, v * r.bound)).collect()
}

/// Recovers the intervals from the rows.
pub fn intervals_of(rows: &[NormalizedRow], n_signals: usize) -> Vec<Interval> {
    let mut out = vec![Interval { lower: None, upper: None }; n_signals];
    for r in rows {
        if r.bound > 0.0 {
            out[r.source].upper = Some(r.bound);
        } else {
            out[r.source].lower = Some(r.bound);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    /// Norm bound of the loop-transformed uncertainty.
    pub bound: f64,
    #[serde(default)]
    pub filter_order: usize,
    #[serde(default = "default_pole")]
    pub filter_pole: f64,
    /// Smallest decay rate for which the bound holds.
    pub rho_min: f64,
}

fn default_pole() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialSpec {
    pub x0: Vec<f64>,
    pub x_hat0: Vec<f64>,
    /// `E` of the initial error set `{e : |E e| <= 1}`; omitted means the
    /// initial estimate is exact.
    #[serde(default, with = "serde_mat::option")]
    pub error_shape: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    /// Weight on `theta = [x; kappa]`; identity when omitted.
    #[serde(default, with = "serde_mat::option")]
    pub state: Option<DMatrix<f64>>,
    /// Weight on the MPC input; identity when omitted.
    #[serde(default, with = "serde_mat::option")]
    pub input: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub strict_eps: f64,
    pub max_iter: u32,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let s = ConicSettings::default();
        SolverSpec { feas_tol: s.feas_tol, gap_tol: s.gap_tol, strict_eps: s.strict_eps, max_iter: s.max_iter }
    }
}

impl From<SolverSpec> for ConicSettings {
    fn from(s: SolverSpec) -> Self {
        ConicSettings { feas_tol: s.feas_tol, gap_tol: s.gap_tol, strict_eps: s.strict_eps, max_iter: s.max_iter }
    }
}

/// Uncertainty used in a simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeltaSpec {
    Zero,
    /// Static gain `+-bound` with a seeded sign (scalar channels) or a
    /// random direction scaled to the bound.
    StaticExtreme,
    /// Random stable LTI system at `fraction` of the bound.
    RandomLti { order: usize, fraction: f64 },
}

/// Disturbance generator; every sample satisfies `|d_t| <= gamma_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceSpec {
    Zero,
    /// I.i.d. uniform in the `gamma_d` ball.
    Uniform,
    /// A seeded unit direction scaled to `gamma_d`, held constant.
    ConstantExtreme,
    /// `gamma_d * sin(2 pi t / period + phase)` per component, phase seeded.
    Sinusoid { period: f64 },
    /// Explicit sequence, repeated if shorter than the run.
    Sequence { values: Vec<Vec<f64>> },
}

/// One uncertainty/disturbance combination of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationSpec {
    pub delta: DeltaSpec,
    pub disturbance: DisturbanceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioBatch {
    pub seeds: usize,
    #[serde(default)]
    pub first_seed: u64,
    pub steps: usize,
    pub nu: NuMode,
    /// Cycled through by seed index.
    pub realizations: Vec<RealizationSpec>,
    /// Disturbance switched off from this step on.
    #[serde(default)]
    pub zero_disturbance_after: Option<usize>,
    /// Time index of the reported `x_1`.
    #[serde(default = "default_report_time")]
    pub report_time: usize,
}

fn default_report_time() -> usize {
    43
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    /// Plant with the raw constraint signals as its `z` output.
    pub plant: Plant,
    /// One interval per raw constraint signal.
    pub constraints: Vec<Interval>,
    pub uncertainty: UncertaintySpec,
    pub rho: f64,
    /// Decay-rate search of the componentwise refinement.
    #[serde(default)]
    pub refine_rho: Option<RhoSearch>,
    /// Weight of `gamma` against `gamma_o` in the joint refinement.
    #[serde(default = "default_weight")]
    pub refine_weight: f64,
    pub gamma_d: f64,
    pub initial: InitialSpec,
    #[serde(default = "default_weights")]
    pub weights: WeightSpec,
    pub horizon: usize,
    #[serde(default)]
    pub terminal: EnlargedOptions,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default = "default_true")]
    pub rowwise: bool,
    /// Imported controller; bootstrapped when omitted.
    #[serde(default)]
    pub controller: Option<Controller>,
    #[serde(default)]
    pub bootstrap: BootstrapOptions,
    pub scenario: ScenarioBatch,
}

fn default_weight() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

fn default_weights() -> WeightSpec {
    WeightSpec { state: None, input: None }
}

impl ProjectConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ProjectConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact serialization of the design-relevant
    /// part (everything except the horizon and the scenario batch).
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("horizon");
            m.remove("scenario");
        }
        let text = serde_json::to_string(&v)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let g = &self.plant;
        if self.constraints.len() != g.n_z() {
            return bad(format!("{} intervals for {} constraint signals", self.constraints.len(), g.n_z()));
        }
        normalize_rows(&self.constraints)?;
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho = {} outside (0, 1)", self.rho));
        }
        let u = &self.uncertainty;
        if !(u.bound >= 0.0) || !(u.rho_min > 0.0 && u.rho_min <= 1.0) {
            return bad("uncertainty bound must be nonnegative and rho_min in (0, 1]".into());
        }
        if self.rho < u.rho_min {
            return bad(format!("rho = {} below the uncertainty's rho_min = {}", self.rho, u.rho_min));
        }
        if !(self.gamma_d >= 0.0) {
            return bad(format!("gamma_d = {} must be nonnegative", self.gamma_d));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        let nx = g.n_x();
        if self.initial.x0.len() != nx || self.initial.x_hat0.len() != nx {
            return bad(format!("initial state and estimate need length {nx}"));
        }
        if let Some(e) = &self.initial.error_shape {
            if e.ncols() != nx {
                return bad(format!("initial error shape needs {nx} columns"));
            }
        }
        if self.scenario.realizations.is_empty() && self.scenario.seeds > 0 {
            return bad("scenario batch needs at least one realization".into());
        }
        if !(self.refine_weight > 0.0) {
            return bad("refine_weight must be positive".into());
        }
        Ok(())
    }

    pub fn rows(&self) -> Result<Vec<NormalizedRow>> {
        normalize_rows(&self.constraints)
    }

    pub fn normalized_plant(&self) -> Result<Plant> {
        normalized_plant(&self.plant, &self.rows()?)
    }

    pub fn settings(&self) -> ConicSettings {
        self.solver.into()
    }

    /// Stage weight on `[theta; u]` for a loop with `n_kappa` controller
    /// states.
    pub fn stage_weight(&self, n_kappa: usize) -> Result<SymMatrix> {
        let (nx, nu) = (self.plant.n_x(), self.plant.n_u());
        let nt = nx + n_kappa;
        let qs = match &self.weights.state {
            Some(m) if m.shape() == (nt, nt) => m.clone(),
            Some(m) => return Err(Error::Config(format!("state weight is {:?}, loop state has {nt} entries", m.shape()))),
            None => DMatrix::identity(nt, nt),
        };
        let ru = match &self.weights.input {
            Some(m) if m.shape() == (nu, nu) => m.clone(),
            Some(m) => return Err(Error::Config(format!("input weight is {:?}, need {nu}x{nu}", m.shape()))),
            None => DMatrix::identity(nu, nu),
        };
        let q = crate::numerics::block_diag(&[&qs, &ru]);
        let q = SymMatrix::symmetrized(q);
        if q.min_eigenvalue() <= 0.0 {
            return Err(Error::Config("stage weight must be positive definite".into()));
        }
        Ok(q)
    }

    /// The two-state benchmark with the shipped design choices.
    pub fn example() -> Self {
        let constraints = two_state_bounds().into_iter().map(|(lo, hi)| Interval { lower: Some(lo), upper: Some(hi) }).collect();
        ProjectConfig {
            plant: two_state_plant(),
            constraints,
            uncertainty: UncertaintySpec { bound: UNCERTAINTY_BOUND, filter_order: 0, filter_pole: 0.5, rho_min: RHO_MIN },
            rho: RHO_MIN,
            refine_rho: None,
            refine_weight: 1.0,
            gamma_d: EXAMPLE_GAMMA_D,
            initial: InitialSpec { x0: EXAMPLE_X0.to_vec(), x_hat0: EXAMPLE_X0.to_vec(), error_shape: None },
            weights: default_weights(),
            horizon: EXAMPLE_HORIZON,
            terminal: EnlargedOptions::default(),
            solver: SolverSpec { strict_eps: DEFAULT_STRICT_EPS, ..SolverSpec::default() },
            rowwise: true,
            controller: None,
            bootstrap: BootstrapOptions::default(),
            scenario: ScenarioBatch {
                seeds: 50,
                first_seed: 0,
                steps: 60,
                nu: NuMode::Optimize,
                realizations: vec![
                    RealizationSpec { delta: DeltaSpec::StaticExtreme, disturbance: DisturbanceSpec::Uniform },
                    RealizationSpec { delta: DeltaSpec::RandomLti { order: 2, fraction: 0.95 }, disturbance: DisturbanceSpec::Uniform },
                    RealizationSpec { delta: DeltaSpec::StaticExtreme, disturbance: DisturbanceSpec::Sinusoid { period: 12.0 } },
                ],
                zero_disturbance_after: None,
                report_time: 43,
            },
        }
    }
}

/// Disturbance peak bound of the shipped benchmark configuration.
pub const EXAMPLE_GAMMA_D: f64 = 0.2;
/// Initial state of the shipped benchmark configuration.
pub const EXAMPLE_X0: [f64; 2] = [0.5, 0.0];
pub const EXAMPLE_HORIZON: usize = 30;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intervals_double_into_rows() {
        let rows = normalize_rows(&ProjectConfig::example().constraints).unwrap();
        assert_eq!(rows.len(), 6);
        let bounds: Vec<f64> = rows.iter().map(|r| r.bound).collect();
        assert_eq!(bounds, vec![1.0, -0.1, 0.05, -0.25, 1.0, -1.0]);
        assert_eq!(intervals_of(&rows, 3), ProjectConfig::example().constraints);
    }

    #[test]
    fn normalized_rows_read_one_at_the_bound() {
        let cfg = ProjectConfig::example();
        let rows = cfg.rows().unwrap();
        let g = cfg.normalized_plant().unwrap();
        // x2 at its upper bound, zero input
        let x = DVector::from_row_slice(&[0.0, 0.05]);
        let z = &g.c_z * &x;
        assert!((z[2] - 1.0).abs() < 1e-15);
        assert!((z[3] + 0.2).abs() < 1e-15);
        let back = denormalize(&z, &rows);
        assert!((back[2].1 - 0.05).abs() < 1e-17);
        assert_eq!(back[2].0, 1);
    }

    #[test]
    fn bad_bounds_are_config_errors() {
        let bad = [Interval { lower: Some(0.1), upper: Some(1.0) }];
        assert!(matches!(normalize_rows(&bad), Err(Error::Config(_))));
        let none = [Interval { lower: None, upper: None }];
        assert!(matches!(normalize_rows(&none), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ProjectConfig::example();
        let text = cfg.to_json().unwrap();
        let back = ProjectConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        let mut other = cfg.clone();
        other.scenario.seeds = 3;
        other.horizon = 4;
        assert_eq!(other.hash().unwrap(), cfg.hash().unwrap());
        other.gamma_d = 0.1;
        assert_ne!(other.hash().unwrap(), cfg.hash().unwrap());
    }
}
