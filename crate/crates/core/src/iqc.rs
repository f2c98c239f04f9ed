//! Hard IQCs with terminal cost: filters, multiplier classes, uncertainty
//! realizations and empirical validation of the integral inequality.

use nalgebra::{Complex, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::serde_mat;
use crate::numerics::{
    block_diag, eye, min_eigenvalue, psd_margin, spectral_norm, spectral_radius, zeros, AffineMatrix, ConicProgram,
    ConicSettings, SymMatrix,
};
use crate::plant::Filter;

/// An `(M, X)` pair of the multiplier set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierPair {
    pub m: SymMatrix,
    pub x: SymMatrix,
}

impl MultiplierPair {
    pub fn zero(n_s: usize, n_psi: usize) -> Self {
        MultiplierPair { m: SymMatrix::zeros(n_s), x: SymMatrix::zeros(n_psi) }
    }

    /// Nonnegative combination `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &MultiplierPair, b: f64) -> MultiplierPair {
        MultiplierPair {
            m: SymMatrix::symmetrized(self.m.as_matrix() * a + other.m.as_matrix() * b),
            x: SymMatrix::symmetrized(self.x.as_matrix() * a + other.x.as_matrix() * b),
        }
    }
}

/// Basis filter repeating `[1; 1/(z-a); ...; 1/(z-a)^r]` on every q and p
/// channel. Outputs are ordered basis-major: `s = [q; xi_1^q; ..; xi_r^q;
/// p; xi_1^p; ..]`. Order 0 is the passthrough `s = [q; p]`.
pub fn basis_filter(order: usize, nq: usize, np: usize, pole: f64) -> Result<Filter> {
    if order == 0 {
        return Ok(Filter::passthrough(nq, np));
    }
    if !(pole > -1.0 && pole < 1.0) {
        return Err(Error::InvalidParameter(format!("filter pole {pole} must lie in (-1, 1)")));
    }
    let chain = |n: usize| -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let ns = n * order;
        let mut a = DMatrix::zeros(ns, ns);
        for k in 0..order {
            for c in 0..n {
                a[(k * n + c, k * n + c)] = pole;
                if k > 0 {
                    a[((k) * n + c, (k - 1) * n + c)] = 1.0;
                }
            }
        }
        let mut b = DMatrix::zeros(ns, n);
        for c in 0..n {
            b[(c, c)] = 1.0;
        }
        // outputs: v then every chain state
        let cs = crate::numerics::vstack(&[&zeros(n, ns), &eye(ns)]);
        let ds = crate::numerics::vstack(&[&eye(n), &zeros(ns, n)]);
        (a, b, cs, ds)
    };
    let (aq, bq, cq, dq) = chain(nq);
    let (ap, bp, cp, dp) = chain(np);
    let (nsq, nsp) = (nq * (order + 1), np * (order + 1));
    let (npq, npp) = (nq * order, np * order);
    Filter::new(
        block_diag(&[&aq, &ap]),
        crate::numerics::vstack(&[&bq, &zeros(npp, nq)]),
        crate::numerics::vstack(&[&zeros(npq, np), &bp]),
        block_diag(&[&cq, &cp]),
        crate::numerics::vstack(&[&dq, &zeros(nsp, nq)]),
        crate::numerics::vstack(&[&zeros(nsq, np), &dp]),
    )
}

/// Multiplier class for uncertainties whose loop transform has `l2` gain at
/// most `bound`: `M = diag(b^2 Pi (x) I_q, -Pi (x) I_p)`, `X = 0`, `Pi >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierClass {
    pub filter: Filter,
    pub bound: f64,
    pub order: usize,
    pub pole: f64,
}

/// Decision variables of one multiplier pair inside a conic program.
#[derive(Debug, Clone)]
pub struct MultiplierVar {
    pub pi: AffineMatrix,
    pub m: AffineMatrix,
    pub x: AffineMatrix,
}

impl MultiplierClass {
    pub fn n_coeff(&self) -> usize {
        self.order + 1
    }

    pub fn n_q(&self) -> usize {
        self.filter.n_q()
    }

    pub fn n_p(&self) -> usize {
        self.filter.n_p()
    }

    fn m_of(&self, pi: &DMatrix<f64>) -> DMatrix<f64> {
        let b2 = self.bound * self.bound;
        block_diag(&[&(pi.kronecker(&eye(self.n_q())) * b2), &(-pi.kronecker(&eye(self.n_p())))])
    }

    /// The pair for coefficient matrix `Pi`; errors if `Pi` is not PSD.
    pub fn pair(&self, pi: &SymMatrix) -> Result<MultiplierPair> {
        if pi.dim() != self.n_coeff() {
            return dim_err(format!("coefficient matrix must be {0}x{0}", self.n_coeff()));
        }
        if pi.min_eigenvalue() < -1e-12 * pi.amax().max(1.0) {
            return Err(Error::InvalidParameter("multiplier coefficients must be positive semidefinite".into()));
        }
        Ok(MultiplierPair { m: SymMatrix::symmetrized(self.m_of(pi.as_matrix())), x: SymMatrix::zeros(self.filter.n_psi()) })
    }

    /// Pairs spanning the coefficient cone: `e_i e_i'` and `(e_i + e_j)(e_i + e_j)'`.
    pub fn basis_pairs(&self) -> Vec<MultiplierPair> {
        let n = self.n_coeff();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i..n {
                let mut v = DVector::zeros(n);
                v[i] = 1.0;
                v[j] = 1.0;
                out.push(self.pair(&SymMatrix::symmetrized(&v * v.transpose())).expect("rank-one PSD"));
            }
        }
        out
    }

    /// Adds a multiplier pair with a PSD coefficient matrix to `prog`.
    pub fn variable(&self, prog: &mut ConicProgram) -> MultiplierVar {
        let pi = prog.symmetric(self.n_coeff());
        prog.psd(&pi);
        let m = pi.map(|c| self.m_of(c));
        let x = AffineMatrix::zeros(self.filter.n_psi(), self.filter.n_psi());
        MultiplierVar { pi, m, x }
    }

    pub fn pair_from_solution(&self, var: &MultiplierVar, x: &[f64]) -> MultiplierPair {
        let pi = DMatrix::from(var.pi.eval(x));
        let pi = SymMatrix::symmetrized(pi);
        // clip tiny negative eigenvalues left by the interior-point solver
        let eig = pi.as_matrix().clone().symmetric_eigen();
        let clipped = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)))
            * eig.eigenvectors.transpose();
        self.pair(&SymMatrix::symmetrized(clipped)).expect("clipped coefficients are PSD")
    }
}

/// Builds the norm-bounded class for `bound` with a basis filter of the
/// given order.
pub fn norm_bounded_class(bound: f64, filter_order: usize, pole: f64, nq: usize, np: usize) -> Result<MultiplierClass> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::InvalidParameter(format!("uncertainty bound must be positive, got {bound}")));
    }
    Ok(MultiplierClass { filter: basis_filter(filter_order, nq, np, pole)?, bound, order: filter_order, pole })
}

/// A concrete uncertainty `p = Delta(q)` together with its declared bound
/// on the loop-transformed gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum UncertaintyRealization {
    StaticGain {
        #[serde(with = "serde_mat")]
        gain: DMatrix<f64>,
        bound: f64,
    },
    StateSpace {
        #[serde(with = "serde_mat")]
        a: DMatrix<f64>,
        #[serde(with = "serde_mat")]
        b: DMatrix<f64>,
        #[serde(with = "serde_mat")]
        c: DMatrix<f64>,
        #[serde(with = "serde_mat")]
        d: DMatrix<f64>,
        bound: f64,
        rho_min: f64,
    },
}

/// Number of decay rates sampled when certifying a state-space uncertainty.
pub const CERTIFICATION_SAMPLES: usize = 12;

impl UncertaintyRealization {
    pub fn zero(nq: usize, np: usize) -> Self {
        UncertaintyRealization::StaticGain { gain: zeros(np, nq), bound: 0.0 }
    }

    /// Static gain; accepted if its spectral norm is at most `bound`.
    pub fn static_gain(gain: DMatrix<f64>, bound: f64) -> Result<Self> {
        let n = spectral_norm(&gain);
        if n > bound * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!("static gain norm {n} exceeds bound {bound}")));
        }
        Ok(UncertaintyRealization::StaticGain { gain, bound })
    }

    /// State-space uncertainty, accepted after a bounded-real certificate of
    /// `|Delta_rho| <= bound` at sampled `rho` in `[rho_min, 1]`.
    pub fn state_space(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, bound: f64, rho_min: f64) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || b.nrows() != n || c.ncols() != n || d.shape() != (c.nrows(), b.ncols()) {
            return dim_err("uncertainty realization blocks inconsistent");
        }
        if !(rho_min > 0.0 && rho_min <= 1.0) {
            return Err(Error::InvalidParameter(format!("rho_min must lie in (0, 1], got {rho_min}")));
        }
        for rho in rho_samples(rho_min) {
            let (ar, br) = (&a / rho, &b / rho);
            if !bounded_real_feasible(&ar, &br, &c, &d, bound)? {
                return Err(Error::InvalidParameter(format!("uncertainty gain exceeds {bound} at rho = {rho:.4}")));
            }
        }
        Ok(UncertaintyRealization::StateSpace { a, b, c, d, bound, rho_min })
    }

    pub fn bound(&self) -> f64 {
        match self {
            UncertaintyRealization::StaticGain { bound, .. } | UncertaintyRealization::StateSpace { bound, .. } => *bound,
        }
    }

    pub fn n_q(&self) -> usize {
        match self {
            UncertaintyRealization::StaticGain { gain, .. } => gain.ncols(),
            UncertaintyRealization::StateSpace { d, .. } => d.ncols(),
        }
    }

    pub fn n_p(&self) -> usize {
        match self {
            UncertaintyRealization::StaticGain { gain, .. } => gain.nrows(),
            UncertaintyRealization::StateSpace { d, .. } => d.nrows(),
        }
    }

    /// The operator itself, zero initial state.
    pub fn operator(&self) -> UncertaintyOperator {
        match self {
            UncertaintyRealization::StaticGain { gain, .. } => UncertaintyOperator::new(
                zeros(0, 0),
                zeros(0, gain.ncols()),
                zeros(gain.nrows(), 0),
                gain.clone(),
            ),
            UncertaintyRealization::StateSpace { a, b, c, d, .. } => UncertaintyOperator::new(a.clone(), b.clone(), c.clone(), d.clone()),
        }
    }

    /// The loop-transformed operator `T_{1/rho} o Delta o T_rho`.
    pub fn loop_transform(&self, rho: f64) -> Result<UncertaintyOperator> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!("rho must lie in (0, 1), got {rho}")));
        }
        let mut op = self.operator();
        op.a /= rho;
        op.b /= rho;
        Ok(op)
    }
}

/// Sample points `rho_min, ..., 1` (equally spaced, inclusive).
pub fn rho_samples(rho_min: f64) -> Vec<f64> {
    let k = CERTIFICATION_SAMPLES;
    (0..k).map(|i| rho_min + (1.0 - rho_min) * i as f64 / (k - 1) as f64).collect()
}

/// Causal LTI operator with internal state; static gains have no state.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyOperator {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub state: DVector<f64>,
}

impl UncertaintyOperator {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Self {
        let n = a.nrows();
        UncertaintyOperator { a, b, c, d, state: DVector::zeros(n) }
    }

    pub fn feedthrough(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Output part that does not depend on the current input.
    pub fn free_output(&self) -> DVector<f64> {
        &self.c * &self.state
    }

    pub fn output(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.c * &self.state + &self.d * q
    }

    /// Consumes `q_t`, returns `p_t` and advances the state.
    pub fn step(&mut self, q: &DVector<f64>) -> DVector<f64> {
        let p = self.output(q);
        self.state = &self.a * &self.state + &self.b * q;
        p
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
    }

    /// Response to a whole input sequence from zero state.
    pub fn simulate(&self, qs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut op = self.clone();
        op.reset();
        qs.iter().map(|q| op.step(q)).collect()
    }
}

/// H-infinity norm estimate by a frequency sweep of `n_grid` points on
/// `[0, pi]`; a lower bound of the true norm.
pub fn hinf_norm_sweep(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, n_grid: usize) -> f64 {
    let n = a.nrows();
    let ac = a.map(|v| Complex::new(v, 0.0));
    let bc = b.map(|v| Complex::new(v, 0.0));
    let cc = c.map(|v| Complex::new(v, 0.0));
    let dc = d.map(|v| Complex::new(v, 0.0));
    let mut best: f64 = 0.0;
    for i in 0..n_grid {
        let w = std::f64::consts::PI * i as f64 / (n_grid - 1).max(1) as f64;
        let z = Complex::new(w.cos(), w.sin());
        let m = DMatrix::<Complex<f64>>::identity(n, n) * z - &ac;
        let h = match m.try_inverse() {
            Some(inv) => &cc * inv * &bc + &dc,
            None => return f64::INFINITY,
        };
        let s = h.svd(false, false).singular_values.max();
        best = best.max(s);
    }
    best
}

/// Strict feasibility of the discrete bounded-real LMI at level `g`.
pub fn bounded_real_feasible(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, g: f64) -> Result<bool> {
    let n = a.nrows();
    if spectral_radius(a) >= 1.0 {
        return Ok(false);
    }
    if n == 0 {
        return Ok(spectral_norm(d) < g);
    }
    let settings = ConicSettings { strict_eps: 1e-9, ..ConicSettings::default() };
    let mut prog = ConicProgram::with_settings(settings);
    let p = prog.symmetric(n);
    prog.positive_definite(&p);
    let ab = crate::numerics::hstack(&[a, b]);
    let cd = crate::numerics::hstack(&[c, d]);
    let nin = b.ncols();
    let lhs = p
        .congruence(&ab)
        .sub(&p.embed(n + nin, n + nin, 0, 0))
        .add_const(&(cd.transpose() * &cd))
        .add_const(&block_diag(&[&zeros(n, n), &(-eye(nin) * (g * g))]));
    prog.negative_definite(&lhs);
    // normalize the scale of P
    prog.psd(&AffineMatrix::identity(n).scale(1e6).sub(&p));
    match prog.solve() {
        Ok(sol) => {
            let pv = sol.value(&p);
            let lv = sol.value(&lhs);
            Ok(min_eigenvalue(&pv) > 0.0 && psd_margin(&lv) < 0.0)
        }
        Err(Error::Infeasible(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Bisection on the bounded-real LMI for the H-infinity norm.
pub fn hinf_norm_lmi(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>, iterations: usize) -> Result<f64> {
    let lo0 = hinf_norm_sweep(a, b, c, d, 512);
    if !lo0.is_finite() {
        return Ok(f64::INFINITY);
    }
    let (mut lo, mut hi) = (lo0, (2.0 * lo0).max(1e-6));
    while !bounded_real_feasible(a, b, c, d, hi)? {
        hi *= 2.0;
        if hi > 1e12 {
            return Ok(f64::INFINITY);
        }
    }
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if bounded_real_feasible(a, b, c, d, mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Random stable state-space uncertainty of order `n` whose loop
/// transform has `sup_rho |Delta_rho|` equal to `fraction * bound` by a
/// frequency sweep, certified by the constructor.
pub fn random_lti_uncertainty(
    rng: &mut impl rand::Rng,
    n: usize,
    nq: usize,
    np: usize,
    bound: f64,
    fraction: f64,
    rho_min: f64,
) -> Result<UncertaintyRealization> {
    let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let r = spectral_radius(&a);
    if r > 0.0 {
        let target = rho_min * rng.random_range(0.2..0.9);
        a *= target / r;
    }
    let b = DMatrix::from_fn(n, nq, |_, _| rng.random_range(-1.0..1.0));
    let c = DMatrix::from_fn(np, n, |_, _| rng.random_range(-1.0..1.0));
    let d = DMatrix::from_fn(np, nq, |_, _| rng.random_range(-0.5..0.5));
    let worst = rho_samples(rho_min)
        .into_iter()
        .map(|rho| hinf_norm_sweep(&(&a / rho), &(&b / rho), &c, &d, 2048))
        .fold(0.0, f64::max);
    let s = fraction * bound / worst;
    UncertaintyRealization::state_space(a, b, &c * s, &d * s, bound, rho_min)
}

#[derive(Debug, Clone)]
pub struct IqcReport {
    /// Smallest value of the accumulated IQC sum over all trials and times.
    pub min_value: f64,
    pub trials: usize,
}

/// Tolerance below zero accepted for the accumulated IQC sum.
pub const IQC_TOLERANCE: f64 = 1e-8;

/// Evaluates the hard IQC along one input sequence; returns the minimum
/// accumulated value over `t = 0..=len` or the first violating time.
pub fn iqc_trajectory_min(filter: &Filter, pair: &MultiplierPair, op: &UncertaintyOperator, qbar: &[DVector<f64>]) -> (f64, Option<usize>) {
    let pbar = op.simulate(qbar);
    let mut psi = DVector::zeros(filter.n_psi());
    let mut acc = 0.0;
    let mut min = pair.x.quad_form(&psi);
    for (t, (q, p)) in qbar.iter().zip(&pbar).enumerate() {
        let (next, s) = filter.step(&psi, q, p).expect("matching dimensions");
        acc += pair.m.quad_form(&s);
        psi = next;
        let v = acc + pair.x.quad_form(&psi);
        min = min.min(v);
        if v < -IQC_TOLERANCE {
            return (min, Some(t + 1));
        }
    }
    (min, None)
}

/// Peak-gain input of length `len` for the operator by power iteration on
/// its finite-horizon Toeplitz matrix.
pub fn peak_gain_input(op: &UncertaintyOperator, len: usize, iterations: usize) -> Vec<DVector<f64>> {
    let (nq, np) = (op.d.ncols(), op.d.nrows());
    // Markov parameters
    let mut markov = vec![op.d.clone()];
    let mut ak_b = op.b.clone();
    for _ in 1..len {
        markov.push(&op.c * &ak_b);
        ak_b = &op.a * ak_b;
    }
    let mut t = DMatrix::zeros(len * np, len * nq);
    for i in 0..len {
        for j in 0..=i {
            t.view_mut((i * np, j * nq), (np, nq)).copy_from(&markov[i - j]);
        }
    }
    let tt = t.transpose() * &t;
    let mut v = DVector::from_element(len * nq, 1.0);
    for _ in 0..iterations {
        let w = &tt * &v;
        let n = w.norm();
        if n == 0.0 {
            break;
        }
        v = w / n;
    }
    (0..len).map(|k| v.rows(k * nq, nq).into_owned()).collect()
}

/// Drives random and adversarial inputs through `Delta_rho` and checks the
/// hard IQC at every time up to `horizon`.
pub fn validate_hard_iqc(
    class: &MultiplierClass,
    pair: &MultiplierPair,
    delta: &UncertaintyRealization,
    rho: f64,
    horizon: usize,
    trials: usize,
    seed: u64,
) -> Result<IqcReport> {
    if pair.m.dim() != class.filter.n_s() || pair.x.dim() != class.filter.n_psi() {
        return dim_err("multiplier pair does not match the class filter");
    }
    if delta.n_q() != class.n_q() || delta.n_p() != class.n_p() {
        return dim_err("uncertainty channels do not match the class");
    }
    let op = delta.loop_transform(rho)?;
    let nq = class.n_q();
    let random: Vec<(f64, Option<usize>)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let q: Vec<DVector<f64>> =
                (0..horizon).map(|_| DVector::from_fn(nq, |_, _| StandardNormal.sample(&mut rng))).collect();
            iqc_trajectory_min(&class.filter, pair, &op, &q)
        })
        .collect();
    let adversarial: Vec<(f64, Option<usize>)> = (0..10)
        .into_par_iter()
        .map(|k| {
            let len = (horizon * (k + 1) / 10).max(1);
            let mut q = peak_gain_input(&op, len, 200);
            q.resize(horizon, DVector::zeros(nq));
            iqc_trajectory_min(&class.filter, pair, &op, &q)
        })
        .collect();
    let mut min = f64::INFINITY;
    for (i, (m, viol)) in random.iter().chain(&adversarial).enumerate() {
        if let Some(t) = viol {
            return Err(Error::ViolationFound(format!("trial {i}: accumulated value {m:.3e} at t = {t}")));
        }
        min = min.min(*m);
    }
    Ok(IqcReport { min_value: min, trials: trials + 10 })
}
