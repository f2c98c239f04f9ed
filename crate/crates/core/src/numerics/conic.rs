//! A small modeling layer for conic programs with affine matrix
//! expressions, backed by Clarabel.
//!
//! Decision variables are scalars collected in one vector `x`. Every
//! expression is affine in `x`: a constant matrix plus one coefficient
//! matrix per variable that appears in it. Products of two expressions
//! are not representable, so every constraint built here is convex.

use std::collections::BTreeMap;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::DMatrix;

use crate::error::{dim_err, Error, Result};
use crate::numerics::linalg::{min_eigenvalue, psd_margin};

/// Default margin used to pose strict LMIs `E < 0` as `E <= -eps I`.
pub const DEFAULT_STRICT_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub struct ConicSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub strict_eps: f64,
    pub max_iter: u32,
}

impl Default for ConicSettings {
    fn default() -> Self {
        Self { feas_tol: 1e-8, gap_tol: 1e-7, strict_eps: DEFAULT_STRICT_EPS, max_iter: 300 }
    }
}

/// Matrix-valued expression affine in the program's decision vector.
#[derive(Debug, Clone)]
pub struct AffineMatrix {
    constant: DMatrix<f64>,
    terms: BTreeMap<usize, DMatrix<f64>>,
}

impl From<DMatrix<f64>> for AffineMatrix {
    fn from(m: DMatrix<f64>) -> Self {
        AffineMatrix { constant: m, terms: BTreeMap::new() }
    }
}

impl From<&DMatrix<f64>> for AffineMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        AffineMatrix::from(m.clone())
    }
}

impl AffineMatrix {
    pub fn zeros(r: usize, c: usize) -> Self {
        DMatrix::zeros(r, c).into()
    }

    pub fn identity(n: usize) -> Self {
        DMatrix::identity(n, n).into()
    }

    pub fn scalar(v: f64) -> Self {
        DMatrix::from_element(1, 1, v).into()
    }

    pub fn nrows(&self) -> usize {
        self.constant.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.constant.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.constant.shape()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.values().all(|m| m.iter().all(|&v| v == 0.0))
    }

    pub fn constant_part(&self) -> &DMatrix<f64> {
        &self.constant
    }

    pub fn add(&self, other: &AffineMatrix) -> AffineMatrix {
        assert_eq!(self.shape(), other.shape(), "affine add shape mismatch");
        let mut out = self.clone();
        out.constant += &other.constant;
        for (k, m) in &other.terms {
            out.terms.entry(*k).and_modify(|e| *e += m).or_insert_with(|| m.clone());
        }
        out
    }

    pub fn sub(&self, other: &AffineMatrix) -> AffineMatrix {
        self.add(&other.scale(-1.0))
    }

    pub fn add_const(&self, m: &DMatrix<f64>) -> AffineMatrix {
        let mut out = self.clone();
        out.constant += m;
        out
    }

    pub fn scale(&self, s: f64) -> AffineMatrix {
        self.map(|m| m * s)
    }

    /// Scales by an affine scalar is not allowed; this multiplies by a
    /// constant matrix on the right.
    pub fn mul_right(&self, m: &DMatrix<f64>) -> AffineMatrix {
        assert_eq!(self.ncols(), m.nrows(), "affine mul_right shape mismatch");
        self.map(|c| c * m)
    }

    pub fn mul_left(&self, m: &DMatrix<f64>) -> AffineMatrix {
        assert_eq!(m.ncols(), self.nrows(), "affine mul_left shape mismatch");
        self.map(|c| m * c)
    }

    /// `Y' self Y`.
    pub fn congruence(&self, y: &DMatrix<f64>) -> AffineMatrix {
        self.map(|c| y.transpose() * c * y)
    }

    pub fn transpose(&self) -> AffineMatrix {
        self.map(|c| c.transpose())
    }

    /// `self + self'`.
    pub fn sym_part2(&self) -> AffineMatrix {
        self.add(&self.transpose())
    }

    /// Applies a linear matrix map to the constant and every coefficient.
    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> AffineMatrix {
        AffineMatrix { constant: f(&self.constant), terms: self.terms.iter().map(|(k, m)| (*k, f(m))).collect() }
    }

    pub fn sub_matrix(&self, r0: usize, c0: usize, r: usize, c: usize) -> AffineMatrix {
        self.map(|m| m.view((r0, c0), (r, c)).into_owned())
    }

    /// Places `self` at `(r0, c0)` inside a zero matrix of the given size.
    pub fn embed(&self, rows: usize, cols: usize, r0: usize, c0: usize) -> AffineMatrix {
        let (r, c) = self.shape();
        self.map(|m| {
            let mut out = DMatrix::zeros(rows, cols);
            out.view_mut((r0, c0), (r, c)).copy_from(m);
            out
        })
    }

    /// Assembles a block matrix from a row-major grid.
    pub fn block(grid: &[Vec<AffineMatrix>]) -> AffineMatrix {
        let heights: Vec<usize> = grid.iter().map(|row| row[0].nrows()).collect();
        let widths: Vec<usize> = grid[0].iter().map(|b| b.ncols()).collect();
        let total_r: usize = heights.iter().sum();
        let total_c: usize = widths.iter().sum();
        let mut out = AffineMatrix::zeros(total_r, total_c);
        let mut r0 = 0;
        for (i, row) in grid.iter().enumerate() {
            assert_eq!(row.len(), widths.len(), "ragged block grid");
            let mut c0 = 0;
            for (j, b) in row.iter().enumerate() {
                assert_eq!(b.shape(), (heights[i], widths[j]), "block ({i},{j}) has wrong shape");
                out = out.add(&b.embed(total_r, total_c, r0, c0));
                c0 += widths[j];
            }
            r0 += heights[i];
        }
        out
    }

    pub fn hstack(parts: &[AffineMatrix]) -> AffineMatrix {
        AffineMatrix::block(&[parts.to_vec()])
    }

    pub fn vstack(parts: &[AffineMatrix]) -> AffineMatrix {
        let grid: Vec<Vec<AffineMatrix>> = parts.iter().map(|p| vec![p.clone()]).collect();
        AffineMatrix::block(&grid)
    }

    pub fn block_diag(parts: &[AffineMatrix]) -> AffineMatrix {
        let r: usize = parts.iter().map(|p| p.nrows()).sum();
        let c: usize = parts.iter().map(|p| p.ncols()).sum();
        let mut out = AffineMatrix::zeros(r, c);
        let (mut i, mut j) = (0, 0);
        for p in parts {
            out = out.add(&p.embed(r, c, i, j));
            i += p.nrows();
            j += p.ncols();
        }
        out
    }

    /// Column vector of every entry of an affine scalar times a constant
    /// matrix: `s * m` where `self` is 1x1.
    pub fn times_const(&self, m: &DMatrix<f64>) -> AffineMatrix {
        assert_eq!(self.shape(), (1, 1), "times_const expects a scalar expression");
        self.map(|c| m * c[(0, 0)])
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        let mut out = self.constant.clone();
        for (k, m) in &self.terms {
            out += m * x[*k];
        }
        out
    }

    fn max_var(&self) -> Option<usize> {
        self.terms.keys().next_back().copied()
    }
}

#[derive(Debug, Clone)]
enum Constraint {
    /// Symmetric expression constrained positive semidefinite.
    Psd(AffineMatrix),
    /// Column `[t; v]` with `|v| <= t`.
    Soc(AffineMatrix),
    /// Elementwise nonnegative column.
    NonNeg(AffineMatrix),
    /// Elementwise zero column.
    Zero(AffineMatrix),
}

/// Carrier for one conic optimization problem. Instantiate one per solve.
#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    n_vars: usize,
    constraints: Vec<Constraint>,
    linear: Option<AffineMatrix>,
    squares: Vec<(AffineMatrix, DMatrix<f64>)>,
    pub settings: ConicSettings,
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: String,
    pub iterations: u32,
}

impl ConicSolution {
    pub fn value(&self, e: &AffineMatrix) -> DMatrix<f64> {
        e.eval(&self.x)
    }

    pub fn scalar(&self, e: &AffineMatrix) -> f64 {
        e.eval(&self.x)[(0, 0)]
    }
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_settings(settings: ConicSettings) -> Self {
        ConicProgram { settings, ..Default::default() }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    fn fresh(&mut self) -> usize {
        self.n_vars += 1;
        self.n_vars - 1
    }

    pub fn scalar(&mut self) -> AffineMatrix {
        let k = self.fresh();
        let mut e = AffineMatrix::zeros(1, 1);
        e.terms.insert(k, DMatrix::from_element(1, 1, 1.0));
        e
    }

    pub fn symmetric(&mut self, n: usize) -> AffineMatrix {
        let mut e = AffineMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let k = self.fresh();
                let mut c = DMatrix::zeros(n, n);
                c[(i, j)] = 1.0;
                c[(j, i)] = 1.0;
                e.terms.insert(k, c);
            }
        }
        e
    }

    pub fn matrix(&mut self, r: usize, c: usize) -> AffineMatrix {
        let mut e = AffineMatrix::zeros(r, c);
        for j in 0..c {
            for i in 0..r {
                let k = self.fresh();
                let mut m = DMatrix::zeros(r, c);
                m[(i, j)] = 1.0;
                e.terms.insert(k, m);
            }
        }
        e
    }

    fn check(&self, e: &AffineMatrix) {
        if let Some(k) = e.max_var() {
            assert!(k < self.n_vars, "expression references a variable from another program");
        }
    }

    /// `e >= 0` in the semidefinite order.
    pub fn psd(&mut self, e: &AffineMatrix) {
        assert_eq!(e.nrows(), e.ncols(), "psd constraint on non-square expression");
        self.check(e);
        if e.nrows() == 0 {
            return;
        }
        let s = e.sym_part2().scale(0.5);
        self.constraints.push(Constraint::Psd(s));
    }

    /// Strict `e < 0`, posed as `e <= -eps I`.
    pub fn negative_definite(&mut self, e: &AffineMatrix) {
        let n = e.nrows();
        let eps = self.settings.strict_eps;
        self.psd(&e.scale(-1.0).add_const(&(DMatrix::identity(n, n) * -eps)));
    }

    /// Strict `e > 0`, posed as `e >= eps I`.
    pub fn positive_definite(&mut self, e: &AffineMatrix) {
        let n = e.nrows();
        let eps = self.settings.strict_eps;
        self.psd(&e.add_const(&(DMatrix::identity(n, n) * -eps)));
    }

    /// Elementwise `e >= 0`.
    pub fn nonneg(&mut self, e: &AffineMatrix) {
        self.check(e);
        if e.nrows() * e.ncols() == 0 {
            return;
        }
        self.constraints.push(Constraint::NonNeg(vectorize(e)));
    }

    /// Elementwise `e == 0`.
    pub fn zero(&mut self, e: &AffineMatrix) {
        self.check(e);
        if e.nrows() * e.ncols() == 0 {
            return;
        }
        self.constraints.push(Constraint::Zero(vectorize(e)));
    }

    /// `|v|_2 <= t` for scalar `t` and column `v`.
    pub fn soc(&mut self, t: &AffineMatrix, v: &AffineMatrix) {
        assert_eq!(t.shape(), (1, 1), "soc bound must be scalar");
        assert_eq!(v.ncols(), 1, "soc body must be a column");
        self.check(t);
        self.check(v);
        self.constraints.push(Constraint::Soc(AffineMatrix::vstack(&[t.clone(), v.clone()])));
    }

    pub fn minimize(&mut self, objective: &AffineMatrix) {
        assert_eq!(objective.shape(), (1, 1), "objective must be scalar");
        self.check(objective);
        self.linear = Some(match self.linear.take() {
            Some(l) => l.add(objective),
            None => objective.clone(),
        });
    }

    /// Adds `e' W e` to the objective for a column expression `e`.
    pub fn add_weighted_square(&mut self, e: &AffineMatrix, weight: &DMatrix<f64>) {
        assert_eq!(e.ncols(), 1, "weighted square expects a column");
        assert_eq!(weight.shape(), (e.nrows(), e.nrows()), "weight shape mismatch");
        self.check(e);
        self.squares.push((e.clone(), weight.clone()));
    }

    /// Solves the program. Primal infeasibility maps to `Error::Infeasible`;
    /// any other non-solved status to `Error::NumericalFailure`.
    pub fn solve(&self) -> Result<ConicSolution> {
        let n = self.n_vars;
        if n == 0 {
            return dim_err("conic program has no decision variables");
        }
        let mut q = vec![0.0; n];
        let mut obj_const = 0.0;
        if let Some(l) = &self.linear {
            obj_const += l.constant[(0, 0)];
            for (k, m) in &l.terms {
                q[*k] += m[(0, 0)];
            }
        }
        // 0.5 x' P x + q' x with P = 2 sum G' W G
        let mut p_dense = DMatrix::<f64>::zeros(n, n);
        for (e, w) in &self.squares {
            let len = e.nrows();
            let keys: Vec<usize> = e.terms.keys().copied().collect();
            let g = DMatrix::from_fn(len, keys.len(), |i, j| e.terms[&keys[j]][(i, 0)]);
            let c = e.constant.column(0).into_owned();
            let gtw = g.transpose() * w;
            let h = &gtw * &g;
            let lin = &gtw * &c;
            for (a, &ka) in keys.iter().enumerate() {
                q[ka] += 2.0 * lin[a];
                for (b, &kb) in keys.iter().enumerate() {
                    p_dense[(ka, kb)] += 2.0 * h[(a, b)];
                }
            }
            obj_const += c.dot(&(w * &c));
        }
        let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..n {
            for i in 0..=j {
                let v = 0.5 * (p_dense[(i, j)] + p_dense[(j, i)]);
                if v != 0.0 {
                    pi.push(i);
                    pj.push(j);
                    pv.push(v);
                }
            }
        }
        let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

        let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0usize;
        let mut push_rows = |entries: Vec<(f64, Vec<(usize, f64)>)>, row: &mut usize| {
            // s = b - A x equals the expression value
            for (constant, coeffs) in entries {
                b.push(constant);
                for (k, v) in coeffs {
                    if v != 0.0 {
                        ai.push(*row);
                        aj.push(k);
                        av.push(-v);
                    }
                }
                *row += 1;
            }
        };
        for c in &self.constraints {
            match c {
                Constraint::Psd(e) => {
                    let d = e.nrows();
                    let mut entries = Vec::with_capacity(d * (d + 1) / 2);
                    for j in 0..d {
                        for i in 0..=j {
                            let s = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                            let coeffs = e.terms.iter().map(|(k, m)| (*k, s * m[(i, j)])).collect();
                            entries.push((s * e.constant[(i, j)], coeffs));
                        }
                    }
                    push_rows(entries, &mut row);
                    cones.push(SupportedConeT::PSDTriangleConeT(d));
                }
                Constraint::Soc(e) | Constraint::NonNeg(e) | Constraint::Zero(e) => {
                    let d = e.nrows();
                    let entries = (0..d)
                        .map(|i| (e.constant[(i, 0)], e.terms.iter().map(|(k, m)| (*k, m[(i, 0)])).collect()))
                        .collect();
                    push_rows(entries, &mut row);
                    cones.push(match c {
                        Constraint::Soc(_) => SupportedConeT::SecondOrderConeT(d),
                        Constraint::NonNeg(_) => SupportedConeT::NonnegativeConeT(d),
                        _ => SupportedConeT::ZeroConeT(d),
                    });
                }
            }
        }
        let a = CscMatrix::new_from_triplets(row, n, ai, aj, av);

        let settings = DefaultSettings::<f64> {
            verbose: false,
            max_iter: self.settings.max_iter,
            tol_feas: self.settings.feas_tol,
            tol_gap_abs: self.settings.gap_tol,
            tol_gap_rel: self.settings.gap_tol,
            ..DefaultSettings::default()
        };

        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::NumericalFailure(format!("solver setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = format!("{:?}", sol.status);
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(ConicSolution {
                x: sol.x.clone(),
                objective: sol.obj_val + obj_const,
                status,
                iterations: sol.iterations,
            }),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Err(Error::Infeasible(status)),
            _ => Err(Error::NumericalFailure(status)),
        }
    }

    /// Largest constraint violation of `x` after re-substitution.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| match c {
                Constraint::Psd(e) => (-min_eigenvalue(&e.eval(x))).max(0.0),
                Constraint::Soc(e) => {
                    let v = e.eval(x);
                    let body = v.rows(1, v.nrows() - 1).norm();
                    (body - v[(0, 0)]).max(0.0)
                }
                Constraint::NonNeg(e) => (-e.eval(x).min()).max(0.0),
                Constraint::Zero(e) => e.eval(x).amax(),
            })
            .fold(0.0, f64::max)
    }

    /// Most positive eigenvalue over all semidefinite constraints of the
    /// negated expressions, i.e. how far from strictly feasible the worst
    /// LMI is (negative means strict).
    pub fn worst_psd_margin(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .filter_map(|c| match c {
                Constraint::Psd(e) => Some(psd_margin(&(-e.eval(x)))),
                _ => None,
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn vectorize(e: &AffineMatrix) -> AffineMatrix {
    let (r, c) = e.shape();
    e.map(|m| DMatrix::from_column_slice(r * c, 1, m.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_lmi_minimum() {
        // minimize t s.t. diag(t) >= I
        let mut prog = ConicProgram::new();
        let t = prog.scalar();
        let lhs = t.times_const(&DMatrix::identity(2, 2)).sub(&AffineMatrix::identity(2));
        prog.psd(&lhs);
        prog.minimize(&t);
        let sol = prog.solve().unwrap();
        assert_relative_eq!(sol.scalar(&t), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn off_diagonal_scaling_is_consistent() {
        // minimize t s.t. [[t, 1], [1, t]] >= 0 -> t = 1
        let mut prog = ConicProgram::new();
        let t = prog.scalar();
        let off = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        prog.psd(&t.times_const(&DMatrix::identity(2, 2)).add_const(&off));
        prog.minimize(&t);
        let sol = prog.solve().unwrap();
        assert_relative_eq!(sol.scalar(&t), 1.0, epsilon = 1e-6);

        // a symmetric matrix variable with a fixed off-diagonal entry
        let mut prog = ConicProgram::new();
        let s = prog.symmetric(2);
        prog.zero(&s.sub_matrix(0, 1, 1, 1).sub(&AffineMatrix::scalar(2.0)));
        prog.psd(&s);
        prog.minimize(&s.sub_matrix(0, 0, 1, 1).add(&s.sub_matrix(1, 1, 1, 1)));
        let sol = prog.solve().unwrap();
        let v = sol.value(&s);
        assert_relative_eq!(v[(0, 1)], 2.0, epsilon = 1e-6);
        assert_relative_eq!(v[(0, 0)] + v[(1, 1)], 4.0, epsilon = 1e-5);
    }

    #[test]
    fn second_order_cone_minimum() {
        // minimize |x|_2 s.t. x1 >= 2
        let mut prog = ConicProgram::new();
        let x = prog.matrix(2, 1);
        let t = prog.scalar();
        prog.soc(&t, &x);
        prog.nonneg(&x.sub_matrix(0, 0, 1, 1).sub(&AffineMatrix::scalar(2.0)));
        prog.minimize(&t);
        let sol = prog.solve().unwrap();
        assert_relative_eq!(sol.scalar(&t), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn quadratic_objective() {
        // minimize (x - 3)^2 + 2 y^2 s.t. y >= 1
        let mut prog = ConicProgram::new();
        let v = prog.matrix(2, 1);
        let e = v.add_const(&DMatrix::from_column_slice(2, 1, &[-3.0, 0.0]));
        prog.add_weighted_square(&e, &DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0])));
        prog.nonneg(&v.sub_matrix(1, 0, 1, 1).sub(&AffineMatrix::scalar(1.0)));
        let sol = prog.solve().unwrap();
        let x = sol.value(&v);
        assert_relative_eq!(x[(0, 0)], 3.0, epsilon = 1e-5);
        assert_relative_eq!(x[(1, 0)], 1.0, epsilon = 1e-5);
        assert_relative_eq!(sol.objective, 2.0, epsilon = 1e-5);
    }

    #[test]
    fn infeasible_is_reported() {
        let mut prog = ConicProgram::new();
        let t = prog.scalar();
        prog.nonneg(&t.sub(&AffineMatrix::scalar(1.0)));
        prog.nonneg(&t.scale(-1.0));
        prog.minimize(&t);
        assert!(matches!(prog.solve(), Err(Error::Infeasible(_))));
    }

    #[test]
    fn lyapunov_feasibility_with_strict_margin() {
        // A' P A - P < 0, P > 0 for a contraction
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.4, -0.3, 0.6]);
        let mut prog = ConicProgram::new();
        let p = prog.symmetric(2);
        prog.negative_definite(&p.congruence(&a).sub(&p));
        prog.positive_definite(&p);
        prog.psd(&AffineMatrix::identity(2).scale(10.0).sub(&p));
        let sol = prog.solve().unwrap();
        assert!(prog.max_violation(&sol.x) <= prog.settings.strict_eps / 10.0);
        let pv = sol.value(&p);
        assert!(min_eigenvalue(&pv) > 0.0);
        assert!(psd_margin(&(a.transpose() * &pv * &a - &pv)) < 0.0);
    }
}
