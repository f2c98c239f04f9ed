//! Offline design sequence and the certificate file.
//!
//! The design runs controller bootstrap (or import) with analysis,
//! estimator synthesis, the optional componentwise joint refinement and the
//! terminal design. Its result is the certificate file, which is
//! re-verified from scratch whenever it is loaded.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    analyze, bootstrap_controller, joint_refine_rowwise, verification_eps, verify_analysis, verify_joint, AnalysisCertificate,
    AnalysisMargins, RhoSearch, RowwiseJoint,
};
use crate::config::{NormalizedRow, ProjectConfig};
use crate::error::{at_stage, Error, Result};
use crate::estimator::{self, BoundChannel, EstimatorCertificate, EstimatorMargins, NominalModel, SynthesisVariables};
use crate::iqc::{norm_bounded_class, MultiplierClass};
use crate::mpc::{ControllerRuntime, MpcSetup, NuMode};
use crate::numerics::SymMatrix;
use crate::plant::{augment_estimator, augment_filter, close_controller, Controller, Estimator, Interconnection, Plant};
use crate::terminal::{design_enlarged, verify_terminal, TerminalData, TerminalIngredients, TerminalReport};
use crate::tube::{initial_bound, Tube, TubeParams};

/// Everything the online controller needs, with the certificates that
/// justify it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub config_hash: String,
    pub rows: Vec<NormalizedRow>,
    pub controller: Controller,
    pub estimator: Estimator,
    pub synthesis: SynthesisVariables,
    pub analysis: AnalysisCertificate,
    pub estimator_certificate: EstimatorCertificate,
    /// Per-row joint certificates of the componentwise design.
    pub rowwise: Option<RowwiseJoint>,
    pub scalar_tube: TubeParams,
    /// The tube used online: scalar or componentwise.
    pub tube: Tube,
    pub channels: Vec<BoundChannel>,
    pub terminal: TerminalIngredients,
    pub q_weight: SymMatrix,
    /// Initial prediction bound per channel.
    pub c_hat0: Vec<f64>,
    /// Initial estimator bound per channel.
    pub c_tilde0: Vec<f64>,
}

/// Margins of every certificate, recomputed from the stored data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub analysis: AnalysisMargins,
    pub estimator: EstimatorMargins,
    pub rows: Vec<(AnalysisMargins, EstimatorMargins)>,
    pub terminal: TerminalReport,
    /// `gamma * gamma_d` per tube channel.
    pub gain_products: Vec<f64>,
    pub eps: f64,
}

impl VerificationReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.analysis.passes(self.eps) {
            out.push(format!("analysis margins {:?}", self.analysis));
        }
        if !self.estimator.passes(self.eps) {
            out.push(format!("estimator margins {:?}", self.estimator));
        }
        for (i, (a, e)) in self.rows.iter().enumerate() {
            if !a.passes(self.eps) || !e.passes(self.eps) {
                out.push(format!("row {i} margins {a:?} / {e:?}"));
            }
        }
        if !self.terminal.passes() {
            out.push(format!("terminal conditions {:?}", self.terminal));
        }
        for (i, g) in self.gain_products.iter().enumerate() {
            if *g > 1.0 {
                out.push(format!("gamma * gamma_d = {g} > 1 on channel {i}"));
            }
        }
        out
    }

    pub fn passes(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Derived objects shared by design, verification and simulation.
#[derive(Debug, Clone)]
pub struct Loop {
    pub plant: Plant,
    pub class: MultiplierClass,
    pub gk: Interconnection,
    pub sigma: Interconnection,
}

impl Loop {
    pub fn new(cfg: &ProjectConfig, controller: &Controller) -> Result<Self> {
        let plant = cfg.normalized_plant()?;
        let class = uncertainty_class(cfg)?;
        let gk = close_controller(&plant, controller)?;
        let sigma = augment_filter(&gk, &class.filter, cfg.rho)?;
        Ok(Loop { plant, class, gk, sigma })
    }

    pub fn model(&self) -> NominalModel {
        NominalModel::from_loop(&self.gk)
    }
}

pub fn uncertainty_class(cfg: &ProjectConfig) -> Result<MultiplierClass> {
    let u = &cfg.uncertainty;
    let g = &cfg.plant;
    norm_bounded_class(u.bound, u.filter_order, u.filter_pole, g.n_q(), g.n_p())
}

fn terminal_data<'a>(model: &'a NominalModel, q_theta: &'a SymMatrix) -> TerminalData<'a> {
    TerminalData { a: &model.a, c_q: &model.c_q, c_z: &model.c_z, q_theta }
}

/// Runs the full offline design.
pub fn synthesize(cfg: &ProjectConfig) -> Result<CertificateFile> {
    cfg.validate()?;
    let settings = cfg.settings();
    let plant = cfg.normalized_plant()?;
    let class = uncertainty_class(cfg)?;
    let controller = match &cfg.controller {
        Some(k) => k.clone(),
        None => at_stage("controller", bootstrap_controller(&plant, &class, cfg.rho, &cfg.bootstrap, &settings))?,
    };
    let lp = at_stage("controller", Loop::new(cfg, &controller))?;
    let analysis = at_stage("analysis", analyze(&lp.gk, &class, cfg.rho, &settings))?;
    let syn = at_stage("estimator", estimator::synthesize(&lp.sigma, &class, &analysis.p, &analysis.m(), &settings))?;
    let scalar_tube = at_stage("tube", TubeParams::from_certificate(&analysis, cfg.gamma_d))?;
    let shape = cfg.initial.error_shape.as_ref();
    let (tube, channels, rowwise, c_hat0, c_tilde0) = if cfg.rowwise {
        let search = cfg.refine_rho.unwrap_or(RhoSearch::Fixed { rho: cfg.rho });
        let joint = at_stage(
            "componentwise refinement",
            joint_refine_rowwise(&lp.gk, &syn.estimator, &class, &search, cfg.refine_weight, &settings),
        )?;
        let mut params = Vec::new();
        let (mut chans, mut c0, mut ct0) = (Vec::new(), Vec::new(), Vec::new());
        for (a, e) in &joint.rows {
            params.push(at_stage("tube", TubeParams::from_certificate(a, cfg.gamma_d))?);
            chans.push(BoundChannel::from(e));
            c0.push(initial_bound(&a.p, a.n_psi(), shape)?);
            ct0.push(initial_bound(&e.p_o, e.n_psi(), shape)?);
        }
        (Tube::Rowwise(params), chans, Some(joint), c0, ct0)
    } else {
        let c0 = initial_bound(&analysis.p, analysis.n_psi(), shape)?;
        let ct0 = initial_bound(&syn.certificate.p_o, syn.certificate.n_psi(), shape)?;
        (Tube::Scalar(scalar_tube), vec![BoundChannel::from(&syn.certificate)], None, vec![c0], vec![ct0])
    };
    let model = lp.model();
    let q_weight = at_stage("terminal", cfg.stage_weight(controller.n_kappa()))?;
    let q_theta = q_weight.sub_block(0, model.n_theta());
    let terminal = at_stage("terminal", design_enlarged(&terminal_data(&model, &q_theta), &tube, &cfg.terminal))?;
    let file = CertificateFile {
        config_hash: cfg.hash()?,
        rows: cfg.rows()?,
        controller,
        estimator: syn.estimator,
        synthesis: syn.variables,
        analysis,
        estimator_certificate: syn.certificate,
        rowwise,
        scalar_tube,
        tube,
        channels,
        terminal,
        q_weight,
        c_hat0,
        c_tilde0,
    };
    let report = at_stage("verification", verify(cfg, &file))?;
    if !report.passes() {
        return Err(Error::Stage {
            stage: "verification".into(),
            source: Box::new(Error::CertificateInvalid(report.failures().join("; "))),
        });
    }
    Ok(file)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

/// Re-checks every stored certificate against the configuration.
pub fn verify(cfg: &ProjectConfig, file: &CertificateFile) -> Result<VerificationReport> {
    let invalid = |m: String| Err(Error::CertificateInvalid(m));
    if file.config_hash != cfg.hash()? {
        return invalid("certificate was produced for a different configuration".into());
    }
    if file.rows != cfg.rows()? {
        return invalid("constraint rows differ from the configuration".into());
    }
    let settings = cfg.settings();
    let eps = verification_eps(&settings);
    let lp = Loop::new(cfg, &file.controller)?;
    let analysis = verify_analysis(&lp.sigma, &lp.class, &file.analysis)?;
    let xi = augment_estimator(&lp.sigma, &file.estimator, cfg.rho)?;
    let est = estimator::verify(&xi, &lp.class, &file.analysis.p, &file.analysis.m(), &file.estimator_certificate)?;
    let reconstructed = file.synthesis.estimator(cfg.rho)?;
    if reconstructed != file.estimator {
        return invalid("stored estimator differs from its reconstruction".into());
    }
    let sc = &file.scalar_tube;
    let a = &file.analysis;
    if !(close(sc.gamma, a.gamma) && close(sc.mu, a.mu) && close(sc.rho, a.rho) && sc.gamma_d == cfg.gamma_d) {
        return invalid("scalar tube constants differ from the analysis certificate".into());
    }
    let shape = cfg.initial.error_shape.as_ref();
    let mut rows = Vec::new();
    let expected: Vec<(TubeParams, BoundChannel, f64, f64)> = match (&file.tube, &file.rowwise) {
        (Tube::Scalar(p), None) => {
            let e = &file.estimator_certificate;
            vec![(*p, BoundChannel::from(e), initial_bound(&a.p, a.n_psi(), shape)?, initial_bound(&e.p_o, e.n_psi(), shape)?)]
        }
        (Tube::Rowwise(ps), Some(joint)) => {
            if ps.len() != joint.rows.len() || ps.len() != file.rows.len() {
                return invalid("componentwise tube needs one channel per constraint row".into());
            }
            let mut out = Vec::new();
            for (i, (ra, re)) in joint.rows.iter().enumerate() {
                let gi = lp.gk.with_output_rows(crate::plant::Channel::Z, &[i])?;
                rows.push(verify_joint(&gi, &file.estimator, &lp.class, ra, re)?);
                let p = TubeParams::new(ra.gamma, ra.mu, ra.rho, cfg.gamma_d)?;
                out.push((p, BoundChannel::from(re), initial_bound(&ra.p, ra.n_psi(), shape)?, initial_bound(&re.p_o, re.n_psi(), shape)?));
            }
            out
        }
        _ => return invalid("tube kind and componentwise certificates disagree".into()),
    };
    if file.channels.len() != expected.len() || file.c_hat0.len() != expected.len() || file.c_tilde0.len() != expected.len() {
        return invalid("channel counts differ".into());
    }
    for (i, (p, ch, c0, ct0)) in expected.iter().enumerate() {
        let q = file.tube.params(i);
        let s = &file.channels[i];
        let same = close(q.gamma, p.gamma)
            && close(q.mu, p.mu)
            && close(q.rho, p.rho)
            && q.gamma_d == p.gamma_d
            && close(s.mu_o, ch.mu_o)
            && close(s.beta_o, ch.beta_o)
            && close(s.rho, ch.rho)
            && file.c_hat0[i] >= *c0 - 1e-12
            && file.c_tilde0[i] >= *ct0 - 1e-12;
        if !same {
            return invalid(format!("channel {i} constants differ from its certificates"));
        }
    }
    let model = lp.model();
    let q_weight = cfg.stage_weight(file.controller.n_kappa())?;
    if q_weight != file.q_weight {
        return invalid("stage weight differs from the configuration".into());
    }
    let q_theta = q_weight.sub_block(0, model.n_theta());
    let terminal = verify_terminal(&file.terminal, &terminal_data(&model, &q_theta), &file.tube)?;
    let gain_products = file.tube.channels().iter().map(|p| p.gamma * p.gamma_d).collect();
    Ok(VerificationReport { analysis, estimator: est, rows, terminal, gain_products, eps })
}

impl CertificateFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Loads a certificate file and re-verifies it against `cfg`.
    pub fn load_verified(path: &Path, cfg: &ProjectConfig) -> Result<(Self, VerificationReport)> {
        let text = std::fs::read_to_string(path)?;
        let file = Self::from_json(&text)?;
        let report = verify(cfg, &file)?;
        if !report.passes() {
            return Err(Error::CertificateInvalid(report.failures().join("; ")));
        }
        Ok((file, report))
    }

    /// Per-row `gamma_i` (equal to the scalar `gamma` without the
    /// componentwise design).
    pub fn row_gammas(&self) -> Vec<f64> {
        match &self.rowwise {
            Some(j) => j.rows.iter().map(|(a, _)| a.gamma).collect(),
            None => vec![self.analysis.gamma; self.rows.len()],
        }
    }

    pub fn row_gammas_o(&self) -> Vec<f64> {
        match &self.rowwise {
            Some(j) => j.rows.iter().map(|(_, e)| e.gamma_o).collect(),
            None => vec![self.estimator_certificate.gamma_o; self.rows.len()],
        }
    }

    /// MPC data for horizon `horizon`.
    pub fn mpc_setup(&self, cfg: &ProjectConfig, horizon: usize) -> Result<MpcSetup> {
        let lp = Loop::new(cfg, &self.controller)?;
        let mut setup = MpcSetup::new(lp.model(), self.tube.clone(), self.terminal.clone(), self.q_weight.clone(), horizon)?;
        setup.settings = cfg.settings();
        Ok(setup)
    }

    /// Online controller started from the configured initial estimate.
    pub fn runtime(&self, cfg: &ProjectConfig, horizon: usize, mode: NuMode) -> Result<ControllerRuntime> {
        let setup = self.mpc_setup(cfg, horizon)?;
        let nt = setup.model.n_theta();
        let mut theta0 = DVector::zeros(nt);
        theta0.rows_mut(0, cfg.plant.n_x()).copy_from_slice(&cfg.initial.x_hat0);
        ControllerRuntime::new(
            setup,
            self.controller.clone(),
            self.estimator.clone(),
            self.channels.clone(),
            mode,
            theta0,
            self.c_hat0.clone(),
            self.c_tilde0.clone(),
        )
    }
}
