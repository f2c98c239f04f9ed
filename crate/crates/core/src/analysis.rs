//! Peak-to-peak analysis of a fixed controller against a multiplier class,
//! its componentwise variant, the joint controller/estimator refinement and
//! a bootstrap controller heuristic.

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::estimator::{EstimatorCertificate, EstimatorMargins};
use crate::iqc::{MultiplierClass, MultiplierPair, MultiplierVar};
use crate::numerics::search::golden_section;
use crate::numerics::{
    eye, min_eigenvalue, pseudo_inverse, psd_margin, rank, solve_dare, spectral_radius, zeros, AffineMatrix,
    ConicProgram, ConicSettings, ConicSolution, SymMatrix,
};
use crate::plant::{augment_estimator, augment_filter, close_controller, Channel, Controller, Estimator, Interconnection, Plant};

/// `rho^2 / (1 - rho^2)`.
pub fn alpha_of(rho: f64) -> f64 {
    rho * rho / (1.0 - rho * rho)
}

/// Block rows of a loop-transformed error system, with columns ordered
/// `(chi, p, w)`.
#[derive(Debug, Clone)]
pub(crate) struct ErrorBlocks {
    pub n_state: usize,
    pub n_psi: usize,
    /// `[I 0 0]`
    pub e: DMatrix<f64>,
    /// `[A B_p B_w]`
    pub f: DMatrix<f64>,
    /// `[C_s D_sp D_sw]`
    pub s: DMatrix<f64>,
    /// performance output row (`z` or `zo`)
    pub z: DMatrix<f64>,
    /// `W' W` with `W = [0 0 I]`
    pub ww: DMatrix<f64>,
}

impl ErrorBlocks {
    pub fn new(sys: &Interconnection, perf: Channel) -> Self {
        use Channel::*;
        let n = sys.n_state();
        let (np, nw) = (sys.in_dim(P), sys.in_dim(W));
        let total = n + np + nw;
        let mut e = DMatrix::zeros(n, total);
        e.view_mut((0, 0), (n, n)).copy_from(&eye(n));
        let mut ww = DMatrix::zeros(total, total);
        ww.view_mut((n + np, n + np), (nw, nw)).copy_from(&eye(nw));
        ErrorBlocks {
            n_state: n,
            n_psi: sys.n_psi(),
            e,
            f: sys.row(State, &[State, P, W]),
            s: sys.row(S, &[State, P, W]),
            z: sys.row(perf, &[State, P, W]),
            ww,
        }
    }

    /// `diag(X, 0)` on the state coordinates.
    pub fn lift_x(&self, x: &AffineMatrix) -> AffineMatrix {
        x.embed(self.n_state, self.n_state, 0, 0)
    }
}

/// A multiplier pair together with the cone coefficients that generate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multiplier {
    pub coeff: SymMatrix,
    pub pair: MultiplierPair,
}

impl Multiplier {
    pub fn from_solution(class: &MultiplierClass, var: &MultiplierVar, sol: &ConicSolution) -> Multiplier {
        let pair = class.pair_from_solution(var, &sol.x);
        let coeff = SymMatrix::symmetrized(sol.value(&var.pi));
        Multiplier { coeff: clip_psd(&coeff), pair }
    }

    /// Checks that the stored pair is the one generated by its coefficients.
    pub fn check(&self, class: &MultiplierClass) -> Result<()> {
        let expect = class.pair(&self.coeff)?;
        let diff = (expect.m.as_matrix() - self.pair.m.as_matrix()).amax() + (expect.x.as_matrix() - self.pair.x.as_matrix()).amax();
        if diff > 1e-12 * (1.0 + self.pair.m.amax()) {
            return Err(Error::CertificateInvalid(format!("multiplier pair differs from its coefficients by {diff:.3e}")));
        }
        Ok(())
    }

    pub fn m_affine(&self) -> AffineMatrix {
        AffineMatrix::from(self.pair.m.as_matrix())
    }

    pub fn x_affine(&self) -> AffineMatrix {
        AffineMatrix::from(self.pair.x.as_matrix())
    }
}

pub(crate) fn clip_psd(s: &SymMatrix) -> SymMatrix {
    if s.dim() == 0 {
        return s.clone();
    }
    let eig = s.as_matrix().clone().symmetric_eigen();
    SymMatrix::symmetrized(
        &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0))) * eig.eigenvectors.transpose(),
    )
}

/// Numeric margins of the analysis LMIs: maximum eigenvalues of the two
/// strict negative LMIs and the minimum eigenvalue of `P - X1 - X2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisMargins {
    pub stability: f64,
    pub performance: f64,
    pub positivity: f64,
    pub p22_min_eig: f64,
}

impl AnalysisMargins {
    pub fn passes(&self, eps: f64) -> bool {
        self.stability <= -eps && self.performance <= -eps && self.positivity >= eps && self.p22_min_eig > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisCertificate {
    pub p: SymMatrix,
    pub mult1: Multiplier,
    pub mult2: Multiplier,
    pub mu: f64,
    pub gamma: f64,
    pub rho: f64,
    pub margins: AnalysisMargins,
}

impl AnalysisCertificate {
    pub fn alpha(&self) -> f64 {
        alpha_of(self.rho)
    }

    pub fn beta(&self) -> f64 {
        self.alpha() * (self.gamma - self.mu)
    }

    /// `M = M1 + M2`.
    pub fn m(&self) -> SymMatrix {
        SymMatrix::symmetrized(self.mult1.pair.m.as_matrix() + self.mult2.pair.m.as_matrix())
    }

    pub fn n_psi(&self) -> usize {
        self.mult1.pair.x.dim()
    }

    /// Block of `P` on the loop state `theta`.
    pub fn p22(&self) -> SymMatrix {
        let n_psi = self.n_psi();
        self.p.sub_block(n_psi, self.p.dim() - n_psi)
    }
}

/// Scalar decision expressions of the analysis conditions.
pub(crate) struct AnalysisExprs<'a> {
    pub p: &'a AffineMatrix,
    pub m1: &'a AffineMatrix,
    pub x1: &'a AffineMatrix,
    pub m2: &'a AffineMatrix,
    pub x2: &'a AffineMatrix,
    pub mu: &'a AffineMatrix,
    pub gamma: &'a AffineMatrix,
}

/// The dissipation LMI, the performance LMI without its `alpha/gamma z'z`
/// term, and `P - X1 - X2`.
pub(crate) fn analysis_lmis(b: &ErrorBlocks, v: &AnalysisExprs, alpha: f64) -> (AffineMatrix, AffineMatrix, AffineMatrix) {
    let m = v.m1.add(v.m2);
    let stab = v.p.congruence(&b.f).sub(&v.p.congruence(&b.e)).add(&m.congruence(&b.s)).sub(&v.mu.times_const(&b.ww));
    let beta = v.gamma.sub(v.mu).scale(alpha);
    let perf = b
        .lift_x(v.x1)
        .sub(v.p)
        .congruence(&b.e)
        .add(&b.lift_x(v.x2).congruence(&b.f))
        .add(&v.m2.congruence(&b.s))
        .sub(&beta.times_const(&b.ww));
    let pos = v.p.sub(&b.lift_x(v.x1)).sub(&b.lift_x(v.x2));
    (stab, perf, pos)
}

/// Schur form of the performance LMI: `[perf, Z'; Z, -(gamma/alpha) I]`.
pub(crate) fn performance_schur(perf: &AffineMatrix, z: &DMatrix<f64>, gamma: &AffineMatrix, alpha: f64) -> AffineMatrix {
    if z.nrows() == 0 {
        return perf.clone();
    }
    let nz = z.nrows();
    AffineMatrix::block(&[
        vec![perf.clone(), AffineMatrix::from(z.transpose())],
        vec![AffineMatrix::from(z), gamma.times_const(&(-eye(nz) / alpha))],
    ])
}

/// Evaluates the analysis LMIs for fixed values.
pub fn verify_analysis(sigma: &Interconnection, class: &MultiplierClass, cert: &AnalysisCertificate) -> Result<AnalysisMargins> {
    let b = ErrorBlocks::new(sigma, Channel::Z);
    check_certificate_shape(&b, class, cert)?;
    cert.mult1.check(class)?;
    cert.mult2.check(class)?;
    if !(cert.gamma >= cert.mu && cert.mu >= 0.0 && cert.gamma > 0.0) {
        return Err(Error::CertificateInvalid(format!("need gamma >= mu >= 0, got {} and {}", cert.gamma, cert.mu)));
    }
    let alpha = cert.alpha();
    let p = AffineMatrix::from(cert.p.as_matrix());
    let (m1, x1, m2, x2) = (cert.mult1.m_affine(), cert.mult1.x_affine(), cert.mult2.m_affine(), cert.mult2.x_affine());
    let (mu, gamma) = (AffineMatrix::scalar(cert.mu), AffineMatrix::scalar(cert.gamma));
    let exprs = AnalysisExprs { p: &p, m1: &m1, x1: &x1, m2: &m2, x2: &x2, mu: &mu, gamma: &gamma };
    let (stab, perf, pos) = analysis_lmis(&b, &exprs, alpha);
    let perf_full = perf.eval(&[]) + (b.z.transpose() * &b.z) * (alpha / cert.gamma);
    Ok(AnalysisMargins {
        stability: psd_margin(&stab.eval(&[])),
        performance: psd_margin(&perf_full),
        positivity: min_eigenvalue(&pos.eval(&[])),
        p22_min_eig: cert.p22().min_eigenvalue(),
    })
}

fn check_certificate_shape(b: &ErrorBlocks, class: &MultiplierClass, cert: &AnalysisCertificate) -> Result<()> {
    if cert.p.dim() != b.n_state || cert.n_psi() != b.n_psi || b.n_psi != class.filter.n_psi() {
        return dim_err("certificate does not match the error system");
    }
    if !(cert.rho > 0.0 && cert.rho < 1.0) {
        return Err(Error::CertificateInvalid(format!("rho = {} outside (0, 1)", cert.rho)));
    }
    Ok(())
}

pub(crate) struct AnalysisVars {
    pub p: AffineMatrix,
    pub v1: MultiplierVar,
    pub v2: MultiplierVar,
    pub mu: AffineMatrix,
    pub gamma: AffineMatrix,
}

/// Adds the analysis conditions for `sigma` to `prog`.
pub(crate) fn add_analysis(prog: &mut ConicProgram, sigma: &Interconnection, class: &MultiplierClass) -> (AnalysisVars, ErrorBlocks) {
    let b = ErrorBlocks::new(sigma, Channel::Z);
    let rho = sigma.rho().expect("loop-transformed system");
    let alpha = alpha_of(rho);
    let p = prog.symmetric(b.n_state);
    let v1 = class.variable(prog);
    let v2 = class.variable(prog);
    let mu = prog.scalar();
    let gamma = prog.scalar();
    let exprs = AnalysisExprs { p: &p, m1: &v1.m, x1: &v1.x, m2: &v2.m, x2: &v2.x, mu: &mu, gamma: &gamma };
    let (stab, perf, pos) = analysis_lmis(&b, &exprs, alpha);
    prog.negative_definite(&stab);
    prog.negative_definite(&performance_schur(&perf, &b.z, &gamma, alpha));
    prog.positive_definite(&pos);
    prog.nonneg(&mu);
    prog.nonneg(&gamma.sub(&mu));
    (AnalysisVars { p, v1, v2, mu, gamma }, b)
}

pub(crate) fn extract_analysis(
    class: &MultiplierClass,
    vars: &AnalysisVars,
    sol: &ConicSolution,
    sigma: &Interconnection,
) -> Result<AnalysisCertificate> {
    let mu = sol.scalar(&vars.mu).max(0.0);
    let gamma = sol.scalar(&vars.gamma).max(mu);
    let mut cert = AnalysisCertificate {
        p: SymMatrix::symmetrized(sol.value(&vars.p)),
        mult1: Multiplier::from_solution(class, &vars.v1, sol),
        mult2: Multiplier::from_solution(class, &vars.v2, sol),
        mu,
        gamma,
        rho: sigma.rho().expect("loop-transformed system"),
        margins: AnalysisMargins { stability: 0.0, performance: 0.0, positivity: 0.0, p22_min_eig: 0.0 },
    };
    cert.margins = verify_analysis(sigma, class, &cert)?;
    Ok(cert)
}

/// Verification threshold applied to freshly solved certificates.
pub fn verification_eps(settings: &ConicSettings) -> f64 {
    settings.strict_eps / 2.0
}

/// Minimizes `gamma` subject to the analysis LMIs for the loop `gk`.
pub fn analyze(gk: &Interconnection, class: &MultiplierClass, rho: f64, settings: &ConicSettings) -> Result<AnalysisCertificate> {
    let sigma = augment_filter(gk, &class.filter, rho)?;
    analyze_sigma(&sigma, class, settings)
}

pub fn analyze_sigma(sigma: &Interconnection, class: &MultiplierClass, settings: &ConicSettings) -> Result<AnalysisCertificate> {
    let mut prog = ConicProgram::with_settings(*settings);
    let (vars, _) = add_analysis(&mut prog, sigma, class);
    prog.minimize(&vars.gamma);
    let sol = prog.solve()?;
    let cert = extract_analysis(class, &vars, &sol, sigma)?;
    if !cert.margins.passes(verification_eps(settings)) {
        return Err(Error::NumericalFailure(format!("analysis certificate failed re-verification: {:?}", cert.margins)));
    }
    Ok(cert)
}

/// How the decay rate is chosen in refinements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RhoSearch {
    Fixed { rho: f64 },
    Golden { lo: f64, hi: f64, iterations: usize },
}

impl RhoSearch {
    /// Runs `f` at the search points and returns the result with the
    /// smallest objective.
    pub fn run<T: Send>(&self, f: impl Fn(f64) -> Result<(f64, T)> + Sync) -> Result<(f64, T)> {
        match *self {
            RhoSearch::Fixed { rho } => f(rho),
            RhoSearch::Golden { lo, hi, iterations } => {
                if !(0.0 < lo && lo < hi && hi < 1.0) {
                    return Err(Error::InvalidParameter(format!("rho interval [{lo}, {hi}] must lie in (0, 1)")));
                }
                let mut best: Option<(f64, f64, T)> = None;
                let mut last_err = None;
                let hist = golden_section(lo, hi, iterations, |rho| match f(rho) {
                    Ok((v, t)) => {
                        if best.as_ref().is_none_or(|b| v < b.1) {
                            best = Some((rho, v, t));
                        }
                        v
                    }
                    Err(e) => {
                        last_err = Some(e);
                        f64::INFINITY
                    }
                });
                debug_assert!(!hist.is_empty());
                match best {
                    Some((_, v, t)) => Ok((v, t)),
                    None => Err(last_err.unwrap_or_else(|| Error::Infeasible("no feasible rho".into()))),
                }
            }
        }
    }
}

/// Per-row certificates for the componentwise tube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowwiseCertificates {
    pub rows: Vec<AnalysisCertificate>,
}

/// Runs `analyze` on each constraint row separately.
pub fn analyze_rowwise(
    gk: &Interconnection,
    class: &MultiplierClass,
    search: &RhoSearch,
    settings: &ConicSettings,
) -> Result<RowwiseCertificates> {
    let nz = gk.out_dim(Channel::Z);
    let results: Vec<Result<AnalysisCertificate>> = (0..nz)
        .into_par_iter()
        .map(|i| {
            let gi = gk.with_output_rows(Channel::Z, &[i])?;
            search.run(|rho| analyze(&gi, class, rho, settings).map(|c| (c.gamma, c))).map(|r| r.1)
        })
        .collect();
    collect_rows(results).map(|rows| RowwiseCertificates { rows })
}

fn collect_rows<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(c) => rows.push(c),
            Err(e) => failures.push(format!("row {i}: {e}")),
        }
    }
    if failures.is_empty() {
        Ok(rows)
    } else {
        Err(Error::Infeasible(failures.join("; ")))
    }
}

/// Joint analysis of a fixed controller and estimator at one decay rate,
/// minimizing `weight * gamma + gamma_o`.
pub fn joint_refine_at(
    gk: &Interconnection,
    l: &Estimator,
    class: &MultiplierClass,
    rho: f64,
    weight: f64,
    settings: &ConicSettings,
) -> Result<(AnalysisCertificate, EstimatorCertificate)> {
    let sigma = augment_filter(gk, &class.filter, rho)?;
    let xi = augment_estimator(&sigma, l, rho)?;
    let mut prog = ConicProgram::with_settings(*settings);
    let (av, _) = add_analysis(&mut prog, &sigma, class);
    let m = av.v1.m.add(&av.v2.m);
    let ev = crate::estimator::add_estimator_analysis(&mut prog, &xi, class, &av.p, &m);
    prog.minimize(&av.gamma.scale(weight).add(&ev.gamma_o));
    let sol = prog.solve()?;
    let a = extract_analysis(class, &av, &sol, &sigma)?;
    let e = crate::estimator::extract_estimator_analysis(class, &ev, &sol, &xi, &a)?;
    let eps = verification_eps(settings);
    if !a.margins.passes(eps) || !e.margins.passes(eps) {
        return Err(Error::NumericalFailure(format!(
            "joint certificate failed re-verification: {:?} / {:?}",
            a.margins, e.margins
        )));
    }
    Ok((a, e))
}

/// Joint refinement with a decay-rate search.
pub fn joint_refine(
    gk: &Interconnection,
    l: &Estimator,
    class: &MultiplierClass,
    search: &RhoSearch,
    weight: f64,
    settings: &ConicSettings,
) -> Result<(AnalysisCertificate, EstimatorCertificate)> {
    search
        .run(|rho| joint_refine_at(gk, l, class, rho, weight, settings).map(|(a, e)| (weight * a.gamma + e.gamma_o, (a, e))))
        .map(|r| r.1)
}

/// Per-row joint certificates `(analysis, estimator)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowwiseJoint {
    pub rows: Vec<(AnalysisCertificate, EstimatorCertificate)>,
}

/// Componentwise joint refinement: one joint problem per constraint row.
pub fn joint_refine_rowwise(
    gk: &Interconnection,
    l: &Estimator,
    class: &MultiplierClass,
    search: &RhoSearch,
    weight: f64,
    settings: &ConicSettings,
) -> Result<RowwiseJoint> {
    let nz = gk.out_dim(Channel::Z);
    let results: Vec<Result<(AnalysisCertificate, EstimatorCertificate)>> = (0..nz)
        .into_par_iter()
        .map(|i| {
            let gi = gk.with_output_rows(Channel::Z, &[i])?;
            joint_refine(&gi, l, class, search, weight, settings)
        })
        .collect();
    collect_rows(results).map(|rows| RowwiseJoint { rows })
}

/// Candidate grid of the bootstrap heuristic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    /// Closed-loop decay targets, as fractions of `rho`.
    pub decay_factors: Vec<f64>,
    pub state_weights: Vec<f64>,
    pub input_weights: Vec<f64>,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            decay_factors: vec![0.9, 0.95, 0.99],
            state_weights: vec![0.1, 1.0, 10.0],
            input_weights: vec![0.01, 0.1, 1.0],
        }
    }
}

/// PBH test: `rank [A - lambda I, B] = n` for every eigenvalue with
/// `|lambda| >= 1 - tol`.
pub fn pbh_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    if n == 0 {
        return true;
    }
    let eig = a.clone().complex_eigenvalues();
    eig.iter().filter(|l| l.norm() >= 1.0 - tol).all(|&l| {
        let mut m = DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex::new(a[(i, j)], 0.0) - if i == j { l } else { Complex::new(0.0, 0.0) };
            }
            for j in 0..b.ncols() {
                m[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = m.svd(false, false).singular_values;
        let smax = sv.max().max(1.0);
        sv.iter().filter(|&&s| s > tol * smax).count() == n
    })
}

/// Heuristic output-feedback design: LQR state feedback on the decay-scaled
/// plant, applied statically when `C_y` has full column rank and through an
/// observer otherwise. Every candidate is checked with [`analyze`]; the one
/// with the smallest verified `gamma` is returned.
pub fn bootstrap_controller(
    g: &Plant,
    class: &MultiplierClass,
    rho: f64,
    opts: &BootstrapOptions,
    settings: &ConicSettings,
) -> Result<Controller> {
    if !pbh_stabilizable(&g.a, &g.b_u, 1e-8) {
        return Err(Error::NoStabilizingController("(A, B_u) is not stabilizable".into()));
    }
    if !pbh_stabilizable(&g.a.transpose(), &g.c_y.transpose(), 1e-8) {
        return Err(Error::NoStabilizingController("(A, C_y) is not detectable".into()));
    }
    let nx = g.n_x();
    let static_ok = rank(&g.c_y, 1e-10) == nx;
    let mut candidates = Vec::new();
    for &f in &opts.decay_factors {
        for &qw in &opts.state_weights {
            for &rw in &opts.input_weights {
                candidates.push((f * rho, qw, rw));
            }
        }
    }
    let verified: Vec<(f64, Controller)> = candidates
        .par_iter()
        .filter_map(|&(r, qw, rw)| {
            let k = lqr_controller(g, r, qw, rw, static_ok).ok()?;
            let gk = close_controller(g, &k).ok()?;
            if spectral_radius(&gk.a()) >= rho {
                return None;
            }
            analyze(&gk, class, rho, settings).ok().map(|c| (c.gamma, k))
        })
        .collect();
    verified
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k)
        .ok_or_else(|| Error::NoStabilizingController(format!("no candidate passed the analysis at rho = {rho}")))
}

fn lqr_controller(g: &Plant, r: f64, qw: f64, rw: f64, static_ok: bool) -> Result<Controller> {
    let (nx, nu, ny) = (g.n_x(), g.n_u(), g.n_y());
    let (_, f) = solve_dare(&(&g.a / r), &(&g.b_u / r), &SymMatrix::symmetrized(eye(nx) * qw), &SymMatrix::symmetrized(eye(nu) * rw))?;
    if static_ok {
        return Ok(Controller::static_gain(-&f * pseudo_inverse(&g.c_y)?));
    }
    let (_, lt) = solve_dare(
        &(g.a.transpose() / r),
        &(g.c_y.transpose() / r),
        &SymMatrix::symmetrized(eye(nx) * qw),
        &SymMatrix::symmetrized(eye(ny) * rw),
    )?;
    let l = lt.transpose();
    let a_k = &g.a - &g.b_u * &f - &l * &g.c_y;
    Controller::new(a_k, l, -f, zeros(nu, ny))
}

/// Convenience: gamma of a controller, or `None` if the analysis fails.
pub fn controller_gamma(g: &Plant, k: &Controller, class: &MultiplierClass, rho: f64, settings: &ConicSettings) -> Option<f64> {
    let gk = close_controller(g, k).ok()?;
    analyze(&gk, class, rho, settings).ok().map(|c| c.gamma)
}

/// Margins of a joint certificate pair.
pub fn verify_joint(
    gk: &Interconnection,
    l: &Estimator,
    class: &MultiplierClass,
    a: &AnalysisCertificate,
    e: &EstimatorCertificate,
) -> Result<(AnalysisMargins, EstimatorMargins)> {
    let sigma = augment_filter(gk, &class.filter, a.rho)?;
    let xi = augment_estimator(&sigma, l, a.rho)?;
    Ok((verify_analysis(&sigma, class, a)?, crate::estimator::verify(&xi, class, &a.p, &a.m(), e)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::{two_state_plant, RHO_MIN, UNCERTAINTY_BOUND};
    use crate::iqc::norm_bounded_class;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example_class() -> MultiplierClass {
        norm_bounded_class(UNCERTAINTY_BOUND, 0, 0.5, 1, 1).unwrap()
    }

    fn example_loop() -> (Plant, Controller, Interconnection) {
        let g = two_state_plant();
        let k = bootstrap_controller(&g, &example_class(), RHO_MIN, &BootstrapOptions::default(), &ConicSettings::default())
            .unwrap();
        let gk = close_controller(&g, &k).unwrap();
        (g, k, gk)
    }

    #[test]
    fn example_bootstrap_verifies() {
        let (_, _, gk) = example_loop();
        let cert = analyze(&gk, &example_class(), RHO_MIN, &ConicSettings::default()).unwrap();
        assert!(cert.gamma.is_finite() && cert.gamma > 0.0);
        assert!(cert.gamma >= cert.mu && cert.mu >= 0.0);
        assert!(cert.margins.passes(5e-8), "{:?}", cert.margins);
        assert!(cert.margins.positivity >= 1e-7 * 0.5);
    }

    /// Plant without uncertainty channels and identity-like performance.
    fn nominal_plant(a: DMatrix<f64>) -> Plant {
        let n = a.nrows();
        Plant::new(
            a,
            zeros(n, 0),
            DMatrix::from_fn(n, 1, |i, _| 1.0 / (1.0 + i as f64)),
            zeros(n, 1),
            zeros(0, n),
            zeros(0, 0),
            zeros(0, 1),
            zeros(0, 1),
            DMatrix::from_fn(1, n, |_, j| if j == 0 { 1.0 } else { 0.5 }),
            zeros(1, 0),
            DMatrix::from_element(1, 1, 0.2),
            zeros(1, 1),
            eye(n),
            zeros(n, 0),
            zeros(n, 1),
        )
        .unwrap()
    }

    #[test]
    fn nominal_gamma_bounds_simulated_peak() {
        let g = nominal_plant(DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.4]));
        let k = Controller::static_gain(zeros(1, 2));
        let gk = close_controller(&g, &k).unwrap();
        let class = norm_bounded_class(1.0, 0, 0.5, 0, 0).unwrap();
        let rho = 0.8;
        let cert = analyze(&gk, &class, rho, &ConicSettings::default()).unwrap();
        // from rest, |z_k| <= gamma for |d| <= 1
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..2000 {
            let mut x = nalgebra::DVector::zeros(2);
            for _ in 0..60 {
                let d = nalgebra::DVector::from_element(1, if rng.random_bool(0.5) { 1.0 } else { -1.0 });
                let (xn, sig) = gk.step(&x, &[(Channel::D, &d)]).unwrap();
                worst = worst.max(sig[&Channel::Z].norm_squared());
                x = xn;
            }
        }
        assert!(worst <= cert.gamma * cert.gamma + 1e-9, "simulated {worst} vs gamma^2 {}", cert.gamma * cert.gamma);
    }

    #[test]
    fn zero_system_drives_gamma_to_zero() {
        let mut g = nominal_plant(zeros(2, 2));
        g.c_z = zeros(1, 2);
        g.d_zd = zeros(1, 1);
        let gk = close_controller(&g, &Controller::static_gain(zeros(1, 2))).unwrap();
        let class = norm_bounded_class(1.0, 0, 0.5, 0, 0).unwrap();
        let cert = analyze(&gk, &class, 0.5, &ConicSettings::default()).unwrap();
        assert!(cert.gamma < 1e-5, "gamma {}", cert.gamma);
        assert!(cert.mu <= cert.gamma);
    }

    #[test]
    fn scaling_z_scales_gamma() {
        let (_, _, gk) = example_loop();
        let class = example_class();
        let s = ConicSettings::default();
        let base = analyze(&gk, &class, RHO_MIN, &s).unwrap().gamma;
        let scaled = analyze(&gk.with_output_scaled(Channel::Z, 2.0).unwrap(), &class, RHO_MIN, &s).unwrap().gamma;
        assert!(((scaled / base) - 2.0).abs() <= 1e-5 * 2.0 * 10.0, "ratio {}", scaled / base);
    }

    #[test]
    fn rowwise_never_exceeds_full_and_improves_one_row() {
        let (_, _, gk) = example_loop();
        let class = example_class();
        let s = ConicSettings::default();
        let full = analyze(&gk, &class, RHO_MIN, &s).unwrap();
        let rows = analyze_rowwise(&gk, &class, &RhoSearch::Fixed { rho: RHO_MIN }, &s).unwrap();
        assert_eq!(rows.rows.len(), 3);
        for r in &rows.rows {
            assert!(r.gamma <= full.gamma + 1e-5);
        }
        assert!(rows.rows.iter().any(|r| r.gamma < full.gamma - 1e-3));
    }

    #[test]
    fn single_row_matches_full_and_duplicates_agree() {
        let (_, _, gk) = example_loop();
        let class = example_class();
        let s = ConicSettings::default();
        let one = gk.with_output_rows(Channel::Z, &[0]).unwrap();
        let full = analyze(&one, &class, RHO_MIN, &s).unwrap();
        let rows = analyze_rowwise(&one, &class, &RhoSearch::Fixed { rho: RHO_MIN }, &s).unwrap();
        assert!((rows.rows[0].gamma - full.gamma).abs() <= 1e-6 * (1.0 + full.gamma));
        let dup = gk.with_output_rows(Channel::Z, &[1, 1]).unwrap();
        let rows = analyze_rowwise(&dup, &class, &RhoSearch::Fixed { rho: RHO_MIN }, &s).unwrap();
        assert!((rows.rows[0].gamma - rows.rows[1].gamma).abs() <= 1e-6 * (1.0 + rows.rows[0].gamma));
    }

    #[test]
    fn unstabilizable_plant_is_rejected() {
        let mut g = two_state_plant();
        g.b_u = zeros(2, 1);
        g.a = DMatrix::from_row_slice(2, 2, &[1.1, 0.0, 0.0, 0.5]);
        let err = bootstrap_controller(&g, &example_class(), RHO_MIN, &BootstrapOptions::default(), &ConicSettings::default());
        assert!(matches!(err, Err(Error::NoStabilizingController(_))));
    }

    #[test]
    fn observer_based_bootstrap_when_state_not_measured() {
        let mut g = two_state_plant();
        g.c_y = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        g.d_yp = zeros(1, 1);
        g.d_yd = zeros(1, 1);
        let k = bootstrap_controller(&g, &example_class(), RHO_MIN, &BootstrapOptions::default(), &ConicSettings::default())
            .unwrap();
        assert_eq!(k.n_kappa(), 2);
        assert!(controller_gamma(&g, &k, &example_class(), RHO_MIN, &ConicSettings::default()).is_some());
    }

    #[test]
    fn nominal_bootstrap_always_verifies() {
        let mut g = two_state_plant();
        g.b_p = zeros(2, 1);
        g.d_qp = zeros(1, 1);
        g.d_zp = zeros(3, 1);
        g.d_yp = zeros(2, 1);
        let k = bootstrap_controller(&g, &example_class(), RHO_MIN, &BootstrapOptions::default(), &ConicSettings::default());
        assert!(k.is_ok());
    }

    #[test]
    fn golden_rho_search_beats_endpoints() {
        let (_, _, gk) = example_loop();
        let class = example_class();
        let s = ConicSettings::default();
        let row = gk.with_output_rows(Channel::Z, &[0]).unwrap();
        let fixed = analyze(&row, &class, 0.95, &s).unwrap().gamma;
        let best = analyze_rowwise(&row, &class, &RhoSearch::Golden { lo: RHO_MIN, hi: 0.95, iterations: 8 }, &s).unwrap();
        assert!(best.rows[0].gamma <= fixed + 1e-6);
        assert!(best.rows[0].rho >= RHO_MIN && best.rows[0].rho <= 0.95);
    }

    #[test]
    fn pbh_detects_uncontrollable_unstable_mode() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.3]);
        assert!(!pbh_stabilizable(&a, &DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), 1e-8));
        assert!(pbh_stabilizable(&a, &DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), 1e-8));
    }
}
