//! Estimator analysis and convex synthesis, the online estimation step with
//! its error-bound recursions, and the peak estimation-error bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::{alpha_of, verification_eps, ErrorBlocks, Multiplier};
use crate::error::{dim_err, Error, Result};
use crate::iqc::{MultiplierClass, MultiplierVar};
use crate::numerics::{
    block, condition_number, eye, gram_factor, image_basis, inverse, min_eigenvalue, psd_margin, selector, zeros,
    AffineMatrix, ConicProgram, ConicSettings, ConicSolution, SymMatrix,
};
use crate::plant::{augment_estimator, Channel, Estimator, Interconnection};

/// Condition number above which `P1 - P2` is treated as singular.
pub const RECONSTRUCTION_COND_LIMIT: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMargins {
    pub stability: f64,
    pub performance: f64,
    pub positivity: f64,
    pub p22_min_eig: f64,
}

impl EstimatorMargins {
    pub fn passes(&self, eps: f64) -> bool {
        self.stability <= -eps && self.performance <= -eps && self.positivity >= eps && self.p22_min_eig > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCertificate {
    /// Storage matrix over `[psi; dtheta; lambda]`.
    pub p_o: SymMatrix,
    pub mult3: Multiplier,
    pub mult4: Multiplier,
    pub mu_o: f64,
    pub gamma_o: f64,
    pub rho: f64,
    pub margins: EstimatorMargins,
}

impl EstimatorCertificate {
    pub fn alpha(&self) -> f64 {
        alpha_of(self.rho)
    }

    pub fn beta_o(&self) -> f64 {
        self.alpha() * (self.gamma_o - self.mu_o)
    }

    pub fn n_psi(&self) -> usize {
        self.mult3.pair.x.dim()
    }

    /// Block of `P_o` after the filter coordinates.
    pub fn p22(&self) -> SymMatrix {
        let n = self.n_psi();
        self.p_o.sub_block(n, self.p_o.dim() - n)
    }
}

pub(crate) struct EstimatorExprs<'a> {
    pub p_o: &'a AffineMatrix,
    pub m3: &'a AffineMatrix,
    pub x3: &'a AffineMatrix,
    pub m4: &'a AffineMatrix,
    pub x4: &'a AffineMatrix,
    pub mu_o: &'a AffineMatrix,
    pub gamma_o: &'a AffineMatrix,
}

/// Dissipation, performance and positivity conditions of the estimation
/// error system for a fixed estimator. `p` and `m` come from the analysis.
pub(crate) fn estimator_lmis(
    b: &ErrorBlocks,
    v: &EstimatorExprs,
    p: &AffineMatrix,
    m: &AffineMatrix,
    alpha: f64,
) -> (AffineMatrix, AffineMatrix, AffineMatrix) {
    let m_o = m.add(v.m3).add(v.m4);
    let stab = v
        .p_o
        .congruence(&b.f)
        .sub(&v.p_o.congruence(&b.e))
        .add(&m_o.congruence(&b.s))
        .sub(&v.mu_o.times_const(&b.ww));
    let beta_o = v.gamma_o.sub(v.mu_o).scale(alpha);
    let perf = b
        .lift_x(v.x3)
        .sub(v.p_o)
        .congruence(&b.e)
        .add(&b.lift_x(v.x4).congruence(&b.f))
        .add(&v.m4.congruence(&b.s))
        .add(&p.congruence(&b.z))
        .sub(&beta_o.times_const(&b.ww));
    let pos = v.p_o.sub(&b.lift_x(v.x3)).sub(&b.lift_x(v.x4));
    (stab, perf, pos)
}

/// Evaluates the estimator conditions for `xi` (which contains the fixed
/// estimator) with analysis data `p`, `m`.
pub fn verify(xi: &Interconnection, class: &MultiplierClass, p: &SymMatrix, m: &SymMatrix, cert: &EstimatorCertificate) -> Result<EstimatorMargins> {
    let b = ErrorBlocks::new(xi, Channel::Zo);
    if cert.p_o.dim() != b.n_state || cert.n_psi() != b.n_psi || p.dim() != b.z.nrows() || m.dim() != b.s.nrows() {
        return dim_err("estimator certificate does not match the estimation error system");
    }
    if xi.rho().is_none_or(|r| (r - cert.rho).abs() > 1e-15) {
        return Err(Error::CertificateInvalid("estimator certificate rho differs from the error system".into()));
    }
    cert.mult3.check(class)?;
    cert.mult4.check(class)?;
    if !(cert.gamma_o >= cert.mu_o && cert.mu_o >= 0.0) {
        return Err(Error::CertificateInvalid(format!("need gamma_o >= mu_o >= 0, got {} and {}", cert.gamma_o, cert.mu_o)));
    }
    let p_o = AffineMatrix::from(cert.p_o.as_matrix());
    let (m3, x3, m4, x4) = (cert.mult3.m_affine(), cert.mult3.x_affine(), cert.mult4.m_affine(), cert.mult4.x_affine());
    let (mu_o, gamma_o) = (AffineMatrix::scalar(cert.mu_o), AffineMatrix::scalar(cert.gamma_o));
    let exprs = EstimatorExprs { p_o: &p_o, m3: &m3, x3: &x3, m4: &m4, x4: &x4, mu_o: &mu_o, gamma_o: &gamma_o };
    let (stab, perf, pos) =
        estimator_lmis(&b, &exprs, &AffineMatrix::from(p.as_matrix()), &AffineMatrix::from(m.as_matrix()), cert.alpha());
    Ok(EstimatorMargins {
        stability: psd_margin(&stab.eval(&[])),
        performance: psd_margin(&perf.eval(&[])),
        positivity: min_eigenvalue(&pos.eval(&[])),
        p22_min_eig: cert.p22().min_eigenvalue(),
    })
}

pub(crate) struct EstimatorVars {
    pub p_o: AffineMatrix,
    pub v3: MultiplierVar,
    pub v4: MultiplierVar,
    pub mu_o: AffineMatrix,
    pub gamma_o: AffineMatrix,
}

/// Adds the fixed-estimator conditions to `prog`; `p` and `m` may be
/// decision expressions of the same program.
pub(crate) fn add_estimator_analysis(
    prog: &mut ConicProgram,
    xi: &Interconnection,
    class: &MultiplierClass,
    p: &AffineMatrix,
    m: &AffineMatrix,
) -> EstimatorVars {
    let b = ErrorBlocks::new(xi, Channel::Zo);
    let alpha = alpha_of(xi.rho().expect("loop-transformed system"));
    let p_o = prog.symmetric(b.n_state);
    let v3 = class.variable(prog);
    let v4 = class.variable(prog);
    let mu_o = prog.scalar();
    let gamma_o = prog.scalar();
    let exprs = EstimatorExprs { p_o: &p_o, m3: &v3.m, x3: &v3.x, m4: &v4.m, x4: &v4.x, mu_o: &mu_o, gamma_o: &gamma_o };
    let (stab, perf, pos) = estimator_lmis(&b, &exprs, p, m, alpha);
    prog.negative_definite(&stab);
    prog.negative_definite(&perf);
    prog.positive_definite(&pos);
    prog.nonneg(&mu_o);
    prog.nonneg(&gamma_o.sub(&mu_o));
    EstimatorVars { p_o, v3, v4, mu_o, gamma_o }
}

pub(crate) fn extract_estimator_analysis(
    class: &MultiplierClass,
    vars: &EstimatorVars,
    sol: &ConicSolution,
    xi: &Interconnection,
    analysis: &crate::analysis::AnalysisCertificate,
) -> Result<EstimatorCertificate> {
    let mu_o = sol.scalar(&vars.mu_o).max(0.0);
    let mut cert = EstimatorCertificate {
        p_o: SymMatrix::symmetrized(sol.value(&vars.p_o)),
        mult3: Multiplier::from_solution(class, &vars.v3, sol),
        mult4: Multiplier::from_solution(class, &vars.v4, sol),
        mu_o,
        gamma_o: sol.scalar(&vars.gamma_o).max(mu_o),
        rho: analysis.rho,
        margins: EstimatorMargins { stability: 0.0, performance: 0.0, positivity: 0.0, p22_min_eig: 0.0 },
    };
    cert.margins = verify(xi, class, &analysis.p, &analysis.m(), &cert)?;
    Ok(cert)
}

/// Minimizes `gamma_o` for a fixed estimator.
pub fn analyze_estimator(
    sigma: &Interconnection,
    l: &Estimator,
    class: &MultiplierClass,
    analysis: &crate::analysis::AnalysisCertificate,
    settings: &ConicSettings,
) -> Result<EstimatorCertificate> {
    let xi = augment_estimator(sigma, l, analysis.rho)?;
    let mut prog = ConicProgram::with_settings(*settings);
    let vars = add_estimator_analysis(
        &mut prog,
        &xi,
        class,
        &AffineMatrix::from(analysis.p.as_matrix()),
        &AffineMatrix::from(analysis.m().as_matrix()),
    );
    prog.minimize(&vars.gamma_o);
    let sol = prog.solve()?;
    let cert = extract_estimator_analysis(class, &vars, &sol, &xi, analysis)?;
    if !cert.margins.passes(verification_eps(settings)) {
        return Err(Error::NumericalFailure(format!("estimator certificate failed re-verification: {:?}", cert.margins)));
    }
    Ok(cert)
}

/// Transformed decision variables of the convex synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisVariables {
    pub p1: SymMatrix,
    pub p2: SymMatrix,
    #[serde(with = "crate::numerics::serde_mat")]
    pub k: DMatrix<f64>,
    #[serde(with = "crate::numerics::serde_mat")]
    pub l: DMatrix<f64>,
    #[serde(with = "crate::numerics::serde_mat")]
    pub m: DMatrix<f64>,
    #[serde(with = "crate::numerics::serde_mat")]
    pub n: DMatrix<f64>,
}

impl SynthesisVariables {
    /// `P_o = [P2, I; I, (P2 - P1)^-1]`.
    pub fn storage(&self) -> Result<SymMatrix> {
        let n = self.p1.dim();
        let w = inverse(&(self.p2.as_matrix() - self.p1.as_matrix()))?;
        Ok(SymMatrix::symmetrized(block(&[&[self.p2.as_matrix(), &eye(n)], &[&eye(n), &w]])))
    }

    /// Congruence factor `Y = [I, I; P1 - P2, 0]` with
    /// `Y' P_o Y = [P1, P1; P1, P2]`.
    pub fn congruence_factor(&self) -> DMatrix<f64> {
        let n = self.p1.dim();
        block(&[&[&eye(n), &eye(n)], &[&(self.p1.as_matrix() - self.p2.as_matrix()), &zeros(n, n)]])
    }

    /// Estimator in the original (not loop-transformed) coordinates.
    pub fn estimator(&self, rho: f64) -> Result<Estimator> {
        let zi = inverse(&(self.p1.as_matrix() - self.p2.as_matrix()))?;
        Estimator::new(&self.k * &zi * rho, &self.l * rho, &self.m * &zi, self.n.clone())
    }

    pub fn condition(&self) -> f64 {
        condition_number(&(self.p1.as_matrix() - self.p2.as_matrix()))
    }
}

/// Output of [`synthesize`].
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub variables: SynthesisVariables,
    pub certificate: EstimatorCertificate,
    pub estimator: Estimator,
}

/// Convex estimator synthesis for the loop-transformed error system
/// `sigma`, with analysis storage `p` and multiplier `m`. Minimizes
/// `gamma_o`; the result is re-verified on the reconstructed estimator.
pub fn synthesize(
    sigma: &Interconnection,
    class: &MultiplierClass,
    p: &SymMatrix,
    m: &SymMatrix,
    settings: &ConicSettings,
) -> Result<Synthesis> {
    let rho = sigma.rho().ok_or_else(|| Error::InvalidParameter("synthesis needs a loop-transformed system".into()))?;
    match attempt(sigma, class, p, m, settings, rho, None) {
        Err(e @ (Error::Infeasible(_) | Error::NumericalFailure(_) | Error::ReconstructionIllConditioned(_))) => {
            // Minimizing gamma_o can drive P_o towards a singular boundary
            // where the solver misreports infeasibility; bisect instead.
            bisect_gamma_o(sigma, class, p, m, settings, rho).ok_or(e)
        }
        r => r,
    }
}

const SYNTHESIS_ATTEMPTS: usize = 4;
/// Bracket and step count of the fallback bisection on `gamma_o`.
pub const GAMMA_O_BRACKET: (f64, f64) = (1e-4, 1e4);
pub const GAMMA_O_BISECTIONS: usize = 12;

fn bisect_gamma_o(
    sigma: &Interconnection,
    class: &MultiplierClass,
    p: &SymMatrix,
    m: &SymMatrix,
    settings: &ConicSettings,
    rho: f64,
) -> Option<Synthesis> {
    let (mut lo, mut hi) = GAMMA_O_BRACKET;
    let mut best = attempt(sigma, class, p, m, settings, rho, Some(hi)).ok()?;
    for _ in 0..GAMMA_O_BISECTIONS {
        let mid = (lo * hi).sqrt();
        match attempt(sigma, class, p, m, settings, rho, Some(mid)) {
            Ok(s) => {
                best = s;
                hi = mid;
            }
            Err(_) => lo = mid,
        }
    }
    Some(best)
}

/// One synthesis with `gamma_o` minimized, or fixed when `gamma_fixed` is
/// given, followed by reconstruction and re-verification.
fn attempt(
    sigma: &Interconnection,
    class: &MultiplierClass,
    p: &SymMatrix,
    m: &SymMatrix,
    settings: &ConicSettings,
    rho: f64,
    gamma_fixed: Option<f64>,
) -> Result<Synthesis> {
    // The change of variables is a congruence with Y, which can shrink the
    // margins by up to |Y|^2; tighten and retry when that happens.
    let mut inner = *settings;
    let mut last = None;
    for _ in 0..SYNTHESIS_ATTEMPTS {
        let vars = synthesize_conditioned(sigma, class, p, m, &inner, gamma_fixed)?;
        let shrink = crate::numerics::spectral_norm(&vars.vars.congruence_factor()).powi(2);
        let (variables, mut certificate) = vars.into_parts(rho)?;
        let estimator = variables.estimator(rho)?;
        let xi = augment_estimator(sigma, &estimator, rho)?;
        certificate.margins = verify(&xi, class, p, m, &certificate)?;
        if certificate.margins.passes(verification_eps(settings)) {
            return Ok(Synthesis { variables, certificate, estimator });
        }
        last = Some(certificate.margins);
        inner.strict_eps *= (2.0 * shrink).clamp(4.0, 1e4);
    }
    Err(Error::NumericalFailure(format!("reconstructed estimator failed re-verification: {last:?}")))
}


fn synthesize_conditioned(
    sigma: &Interconnection,
    class: &MultiplierClass,
    p: &SymMatrix,
    m: &SymMatrix,
    settings: &ConicSettings,
    gamma_fixed: Option<f64>,
) -> Result<RawSynthesis> {
    let first = synthesize_once(sigma, class, p, m, settings, None, gamma_fixed)?;
    if first.condition() <= RECONSTRUCTION_COND_LIMIT {
        return Ok(first);
    }
    let gap = settings.strict_eps + 1e-9 * first.vars.p2.as_matrix().norm();
    let second = synthesize_once(sigma, class, p, m, settings, Some(gap), gamma_fixed)?;
    if second.condition() > RECONSTRUCTION_COND_LIMIT {
        return Err(Error::ReconstructionIllConditioned(second.condition()));
    }
    Ok(second)
}

struct RawSynthesis {
    vars: SynthesisVariables,
    mult3: Multiplier,
    mult4: Multiplier,
    mu_o: f64,
    gamma_o: f64,
}

impl RawSynthesis {
    fn condition(&self) -> f64 {
        self.vars.condition()
    }

    fn into_parts(self, rho: f64) -> Result<(SynthesisVariables, EstimatorCertificate)> {
        let p_o = self.vars.storage()?;
        let cert = EstimatorCertificate {
            p_o,
            mult3: self.mult3,
            mult4: self.mult4,
            mu_o: self.mu_o,
            gamma_o: self.gamma_o,
            rho,
            margins: EstimatorMargins { stability: 0.0, performance: 0.0, positivity: 0.0, p22_min_eig: 0.0 },
        };
        Ok((self.vars, cert))
    }
}

fn synthesize_once(
    sigma: &Interconnection,
    class: &MultiplierClass,
    p: &SymMatrix,
    m: &SymMatrix,
    settings: &ConicSettings,
    gap: Option<f64>,
    gamma_fixed: Option<f64>,
) -> Result<RawSynthesis> {
    use Channel::*;
    let rho = sigma.rho().expect("checked by caller");
    let alpha = alpha_of(rho);
    let (nchi, npsi) = (sigma.n_state(), sigma.n_psi());
    let nt = nchi - npsi;
    let (np, nw, ny) = (sigma.in_dim(P), sigma.in_dim(W), sigma.out_dim(Y));
    if p.dim() != nchi || m.dim() != sigma.out_dim(S) {
        return dim_err("analysis storage or multiplier does not match the error system");
    }
    let a = sigma.a();
    let (bp, bw) = (sigma.block(State, P), sigma.block(State, W));
    let (cy, dyp, dyw) = (sigma.block(Y, State), sigma.block(Y, P), sigma.block(Y, W));
    let (cs, dsp, dsw) = (sigma.block(S, State), sigma.block(S, P), sigma.block(S, W));
    let ncol = 2 * nchi + np + nw;

    let mut prog = ConicProgram::with_settings(*settings);
    let p1 = prog.symmetric(nchi);
    let p2 = prog.symmetric(nchi);
    let kt = prog.matrix(nchi, nchi);
    let lt = prog.matrix(nchi, ny);
    let mt = prog.matrix(nt, nchi);
    let nt_v = prog.matrix(nt, ny);
    let v3 = class.variable(&mut prog);
    let v4 = class.variable(&mut prog);
    let mu_o = prog.scalar();
    let gamma_o = prog.scalar();

    let c = |m: &DMatrix<f64>| AffineMatrix::from(m);
    let g1 = DMatrix::from_fn(nchi, ncol, |_, _| 0.0);
    let g1 = {
        let mut g = g1;
        g.view_mut((0, 0), (nchi, nchi)).copy_from(&a);
        g.view_mut((0, nchi), (nchi, nchi)).copy_from(&a);
        g.view_mut((0, 2 * nchi), (nchi, np)).copy_from(&bp);
        g.view_mut((0, 2 * nchi + np), (nchi, nw)).copy_from(&bw);
        g
    };
    let lcy = lt.mul_right(&cy);
    let g2 = AffineMatrix::hstack(&[lcy.add(&kt), lcy.clone(), lt.mul_right(&dyp), lt.mul_right(&dyw)]);
    let s = crate::numerics::hstack(&[&cs, &cs, &dsp, &dsw]);
    let mut w_sel = DMatrix::zeros(ncol, ncol);
    w_sel.view_mut((ncol - nw, ncol - nw), (nw, nw)).copy_from(&eye(nw));
    let m_o = c(m.as_matrix()).add(&v3.m).add(&v4.m);
    let lift = |x: &AffineMatrix| x.embed(nchi, nchi, 0, 0);
    let zero_pad = |e: AffineMatrix| e.embed(ncol, ncol, 0, 0);

    let ypy = AffineMatrix::block(&[vec![p1.clone(), p1.clone()], vec![p1.clone(), p2.clone()]]);
    let o1 = zero_pad(ypy.scale(-1.0))
        .add(&p2.congruence(&g1))
        .add(&g2.mul_left(&g1.transpose()).sym_part2())
        .add(&m_o.congruence(&s))
        .sub(&mu_o.times_const(&w_sel));
    let lmi27 = AffineMatrix::block(&[vec![o1, g2.transpose()], vec![g2.clone(), p1.sub(&p2)]]);
    prog.negative_definite(&lmi27);

    let x3 = lift(&v3.x);
    let t3 = |pj: &AffineMatrix| x3.sub(pj);
    let o2_state = AffineMatrix::block(&[vec![t3(&p1), t3(&p1)], vec![t3(&p1), t3(&p2)]]);
    let sel_psi = selector(0, npsi, nchi);
    let e_theta = selector(npsi, nt, nchi);
    let h1 = crate::numerics::hstack(&[&sel_psi, &sel_psi, &zeros(npsi, np), &zeros(npsi, nw)]);
    let ncy = nt_v.mul_right(&cy);
    let h2 = AffineMatrix::hstack(&[
        c(&e_theta).sub(&ncy).sub(&mt),
        c(&e_theta).sub(&ncy),
        nt_v.mul_right(&dyp).scale(-1.0),
        nt_v.mul_right(&dyw).scale(-1.0),
    ]);
    let p11 = p.sub_block(0, npsi);
    let p12 = p.as_matrix().view((0, npsi), (npsi, nt)).into_owned();
    let p22 = p.sub_block(npsi, nt);
    let r = gram_factor(&p22)?;
    let beta_o = gamma_o.sub(&mu_o).scale(alpha);
    let o2 = zero_pad(o2_state)
        .add(&lift(&v4.x).congruence(&g1))
        .add(&c(&(h1.transpose() * p11.as_matrix() * &h1)))
        .add(&h2.mul_left(&(h1.transpose() * &p12)).sym_part2())
        .add(&v4.m.congruence(&s))
        .sub(&beta_o.times_const(&w_sel));
    let rh2 = h2.mul_left(&r);
    let lmi28 = AffineMatrix::block(&[vec![o2, rh2.transpose()], vec![rh2, AffineMatrix::from(-eye(nt))]]);
    prog.negative_definite(&lmi28);

    let xs = lift(&v3.x).add(&lift(&v4.x));
    let tp = |pj: &AffineMatrix| pj.sub(&xs);
    prog.positive_definite(&AffineMatrix::block(&[vec![tp(&p1), tp(&p1)], vec![tp(&p1), tp(&p2)]]));
    if let Some(g) = gap {
        prog.psd(&p2.sub(&p1).sub(&AffineMatrix::from(eye(nchi) * g)));
    }
    prog.nonneg(&mu_o);
    prog.nonneg(&gamma_o.sub(&mu_o));
    match gamma_fixed {
        Some(g) => prog.zero(&gamma_o.sub(&AffineMatrix::scalar(g))),
        None => prog.minimize(&gamma_o),
    }
    let sol = prog.solve()?;

    let mu_val = sol.scalar(&mu_o).max(0.0);
    Ok(RawSynthesis {
        vars: SynthesisVariables {
            p1: SymMatrix::symmetrized(sol.value(&p1)),
            p2: SymMatrix::symmetrized(sol.value(&p2)),
            k: sol.value(&kt),
            l: sol.value(&lt),
            m: sol.value(&mt),
            n: sol.value(&nt_v),
        },
        mult3: Multiplier::from_solution(class, &v3, &sol),
        mult4: Multiplier::from_solution(class, &v4, &sol),
        mu_o: mu_val,
        gamma_o: sol.scalar(&gamma_o).max(mu_val),
    })
}

/// Peak-to-peak bound on the estimation error: synthesis with
/// `P = diag(0, alpha I)` and `M = 0`. Returns `gamma_o` with the synthesis.
pub fn peak_error_bound(sigma: &Interconnection, class: &MultiplierClass, settings: &ConicSettings) -> Result<(f64, Synthesis)> {
    let rho = sigma.rho().ok_or_else(|| Error::InvalidParameter("needs a loop-transformed system".into()))?;
    let (nchi, npsi) = (sigma.n_state(), sigma.n_psi());
    let mut p = DMatrix::zeros(nchi, nchi);
    p.view_mut((npsi, npsi), (nchi - npsi, nchi - npsi)).copy_from(&(eye(nchi - npsi) * alpha_of(rho)));
    let m = SymMatrix::zeros(sigma.out_dim(Channel::S));
    let syn = synthesize(sigma, class, &SymMatrix::symmetrized(p), &m, settings)?;
    Ok((syn.certificate.gamma_o, syn))
}

/// The nominal model driven by the MPC input:
/// `theta+ = A theta + B u`, `y = C_y theta`, `q = C_q theta + D_qu u`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalModel {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub c_q: DMatrix<f64>,
    pub d_qu: DMatrix<f64>,
    pub c_z: DMatrix<f64>,
    pub d_zu: DMatrix<f64>,
}

impl NominalModel {
    pub fn from_loop(gk: &Interconnection) -> Self {
        use Channel::*;
        NominalModel {
            a: gk.a(),
            b_u: gk.block(State, U),
            c_y: gk.block(Y, State),
            c_q: gk.block(Q, State),
            d_qu: gk.block(Q, U),
            c_z: gk.block(Z, State),
            d_zu: gk.block(Z, U),
        }
    }

    pub fn n_theta(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
}

/// Basis of the image of `D_qu` and the part of `C_q` orthogonal to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub d: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl ProjectionPair {
    pub fn new(d_qu: &DMatrix<f64>, c_q: &DMatrix<f64>) -> Result<Self> {
        if d_qu.nrows() != c_q.nrows() {
            return dim_err("D_qu and C_q row counts differ");
        }
        let d = image_basis(d_qu);
        if d.ncols() == 0 {
            return Ok(ProjectionPair { d, c: c_q.clone() });
        }
        let g = inverse(&(d.transpose() * &d))?;
        let proj = eye(d.nrows()) - &d * g * d.transpose();
        Ok(ProjectionPair { c: proj * c_q, d })
    }
}

/// Constants of one error-bound channel (one per constraint row in the
/// componentwise design, a single one otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundChannel {
    pub rho: f64,
    pub mu_o: f64,
    pub beta_o: f64,
}

impl From<&EstimatorCertificate> for BoundChannel {
    fn from(c: &EstimatorCertificate) -> Self {
        BoundChannel { rho: c.rho, mu_o: c.mu_o, beta_o: c.beta_o() }
    }
}

/// Output of [`EstimatorRunState::estimate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateOutput {
    pub theta: DVector<f64>,
    pub c_bar: Vec<f64>,
}

/// Online state of the estimator and its bound recursions.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRunState {
    pub lambda: DVector<f64>,
    pub theta_tilde: DVector<f64>,
    pub c_tilde: Vec<f64>,
    pub c_bar: Vec<f64>,
    pub t: usize,
}

impl EstimatorRunState {
    pub fn new(theta0: DVector<f64>, n_lambda: usize, c_tilde0: Vec<f64>) -> Self {
        let n = c_tilde0.len();
        EstimatorRunState { lambda: DVector::zeros(n_lambda), theta_tilde: theta0, c_tilde: c_tilde0, c_bar: vec![0.0; n], t: 0 }
    }

    /// Processes the measurement `y`: updates the estimator state and
    /// returns the estimate and its bounds.
    pub fn estimate(
        &mut self,
        y: &DVector<f64>,
        l: &Estimator,
        model: &NominalModel,
        proj: &ProjectionPair,
        channels: &[BoundChannel],
        gamma_d: f64,
    ) -> Result<EstimateOutput> {
        if y.len() != model.c_y.nrows() || channels.len() != self.c_tilde.len() {
            return dim_err("measurement or channel count mismatch");
        }
        let dy = y - &model.c_y * &self.theta_tilde;
        let (lambda_next, dtheta) = l.step(&self.lambda, &dy)?;
        self.lambda = lambda_next;
        let cq2 = (&proj.c * &self.theta_tilde).norm_squared();
        self.c_bar = channels
            .iter()
            .zip(&self.c_tilde)
            .map(|(ch, &ct)| ct + ch.beta_o * (cq2 + gamma_d * gamma_d))
            .collect();
        Ok(EstimateOutput { theta: &self.theta_tilde + dtheta, c_bar: self.c_bar.clone() })
    }

    /// Advances the nominal state and `c_tilde` with the applied MPC input.
    pub fn advance(&mut self, u: &DVector<f64>, model: &NominalModel, channels: &[BoundChannel], gamma_d: f64) -> Result<()> {
        if u.len() != model.n_u() {
            return dim_err("MPC input length mismatch");
        }
        let q = &model.c_q * &self.theta_tilde + &model.d_qu * u;
        let q2 = q.norm_squared();
        for (ct, ch) in self.c_tilde.iter_mut().zip(channels) {
            let r2 = ch.rho * ch.rho;
            *ct = r2 * *ct + ch.mu_o * r2 * (q2 + gamma_d * gamma_d);
        }
        self.theta_tilde = &model.a * &self.theta_tilde + &model.b_u * u;
        self.t += 1;
        Ok(())
    }
}
