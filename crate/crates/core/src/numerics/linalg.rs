//! Dense helpers: symmetric matrices, spectra, special norms and
//! discrete-time Lyapunov / Riccati solves.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Largest tolerated asymmetry (relative to the entry scale) before a
/// matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A real symmetric matrix. Construction symmetrizes after checking that
/// the input is symmetric up to [`SYMMETRY_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return dim_err(format!("symmetric matrix must be square, got {}x{}", m.nrows(), m.ncols()));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::InvalidParameter(format!("matrix asymmetry {asym:.3e} exceeds tolerance")));
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes without checking; for matrices that are symmetric by
    /// construction up to rounding.
    pub fn symmetrized(m: DMatrix<f64>) -> Self {
        let s = (&m + m.transpose()) * 0.5;
        SymMatrix(s)
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn max_eigenvalue(&self) -> f64 {
        psd_margin(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.0)
    }

    /// Principal sub-block `[start, start+len)`.
    pub fn sub_block(&self, start: usize, len: usize) -> SymMatrix {
        SymMatrix(self.0.view((start, start), (len, len)).into_owned())
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.0 * x))
    }
}

impl TryFrom<DMatrix<f64>> for SymMatrix {
    type Error = Error;
    fn try_from(m: DMatrix<f64>) -> Result<Self> {
        SymMatrix::new(m)
    }
}

impl TryFrom<Vec<Vec<f64>>> for SymMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        SymMatrix::new(super::serde_mat::from_rows(&rows)?)
    }
}

impl From<SymMatrix> for Vec<Vec<f64>> {
    fn from(s: SymMatrix) -> Self {
        super::serde_mat::to_rows(&s.0)
    }
}

impl From<SymMatrix> for DMatrix<f64> {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

impl std::ops::Deref for SymMatrix {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Maximum eigenvalue of a symmetric matrix. Callers compare it against
/// `-eps` to certify strict negative definiteness.
pub fn psd_margin(e: &DMatrix<f64>) -> f64 {
    if e.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let s = (e + e.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.max()
}

pub fn min_eigenvalue(e: &DMatrix<f64>) -> f64 {
    if e.nrows() == 0 {
        return f64::INFINITY;
    }
    let s = (e + e.transpose()) * 0.5;
    SymmetricEigen::new(s).eigenvalues.min()
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Induced 2-to-infinity norm: the largest Euclidean row norm.
pub fn two_to_inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Solves `A' S A - S + Q = 0` for Schur-stable `A`.
pub fn solve_discrete_lyapunov(a: &DMatrix<f64>, q: &SymMatrix) -> Result<SymMatrix> {
    let n = a.nrows();
    if !a.is_square() || q.dim() != n {
        return dim_err(format!("lyapunov: A is {}x{}, Q is {}x{}", a.nrows(), a.ncols(), q.dim(), q.dim()));
    }
    let rho = spectral_radius(a);
    if rho >= 1.0 - 1e-9 {
        return Err(Error::NotSchurStable(rho));
    }
    if n == 0 {
        return Ok(SymMatrix::zeros(0));
    }
    let s = if n <= 20 { lyapunov_kronecker(a, q.as_matrix())? } else { lyapunov_doubling(a, q.as_matrix()) };
    Ok(SymMatrix::symmetrized(s))
}

fn lyapunov_kronecker(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let lhs = DMatrix::<f64>::identity(n * n, n * n) - at.kronecker(&at);
    let rhs = DVector::from_column_slice(q.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NumericalFailure("singular Lyapunov operator".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

fn lyapunov_doubling(a: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = q.clone();
    let mut ak = a.clone();
    for _ in 0..64 {
        s = &s + ak.transpose() * &s * &ak;
        ak = &ak * &ak;
        if ak.amax() < 1e-18 {
            break;
        }
    }
    s
}

/// Stabilizing solution of the discrete algebraic Riccati equation and the
/// associated LQR gain `F` (control law `u = -F x`).
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &SymMatrix, r: &SymMatrix) -> Result<(SymMatrix, DMatrix<f64>)> {
    let n = a.nrows();
    let m = b.ncols();
    if b.nrows() != n || q.dim() != n || r.dim() != m {
        return dim_err("dare: inconsistent dimensions");
    }
    let mut x = q.as_matrix().clone();
    let mut gain = DMatrix::zeros(m, n);
    for _ in 0..20_000 {
        let btx = b.transpose() * &x;
        let s = r.as_matrix() + &btx * b;
        let f = s
            .clone()
            .lu()
            .solve(&(&btx * a))
            .ok_or_else(|| Error::NumericalFailure("dare: singular R + B'XB".into()))?;
        let next = a.transpose() * &x * a - a.transpose() * &x * b * &f + q.as_matrix();
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &x).amax();
        x = next;
        gain = f;
        if delta <= 1e-13 * x.amax().max(1.0) {
            break;
        }
    }
    let closed = a - b * &gain;
    let rho = spectral_radius(&closed);
    if rho >= 1.0 {
        return Err(Error::NotSchurStable(rho));
    }
    Ok((SymMatrix::symmetrized(x), gain))
}

/// Orthonormal basis of the column space, rank decided by an SVD threshold
/// of `1e-10 * sigma_max`.
pub fn image_basis(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.is_empty() {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(a.nrows(), 0);
    }
    let cols: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > 1e-10 * smax).collect();
    let mut basis = DMatrix::zeros(a.nrows(), cols.len());
    for (j, &i) in cols.iter().enumerate() {
        basis.set_column(j, &u.column(i));
    }
    basis
}

pub fn rank(a: &DMatrix<f64>, tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    sv.iter().filter(|&&s| s > tol * smax.max(1.0)).count()
}

pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.is_empty() {
        return Ok(DMatrix::zeros(a.ncols(), a.nrows()));
    }
    a.clone().pseudo_inverse(1e-12).map_err(|e| Error::NumericalFailure(e.to_string()))
}

pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Ok(a.clone());
    }
    a.clone().try_inverse().ok_or_else(|| Error::NumericalFailure("singular matrix".into()))
}

/// Factor `T` with `T' T = S` for `S` positive definite (upper Cholesky factor).
pub fn gram_factor(s: &SymMatrix) -> Result<DMatrix<f64>> {
    let chol = s
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("matrix is not positive definite".into()))?;
    Ok(chol.l().transpose())
}

/// `max { x' P x : |E x| <= 1 }` for invertible `E`.
pub fn max_quadratic_on_ellipsoid(p: &DMatrix<f64>, shape: &DMatrix<f64>) -> Result<f64> {
    if p.nrows() != shape.ncols() || !shape.is_square() {
        return dim_err("ellipsoid shape does not match quadratic form");
    }
    if p.nrows() == 0 {
        return Ok(0.0);
    }
    let e_inv = inverse(shape)?;
    let m = e_inv.transpose() * p * &e_inv;
    Ok(psd_margin(&m).max(0.0))
}

pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let (mut i, mut j) = (0, 0);
    for b in blocks {
        out.view_mut((i, j), (b.nrows(), b.ncols())).copy_from(b);
        i += b.nrows();
        j += b.ncols();
    }
    out
}

pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let r = blocks.first().map_or(0, |b| b.nrows());
    let c: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(r, c);
    let mut j = 0;
    for b in blocks {
        assert_eq!(b.nrows(), r, "hstack row mismatch");
        out.view_mut((0, j), (r, b.ncols())).copy_from(b);
        j += b.ncols();
    }
    out
}

pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let c = blocks.first().map_or(0, |b| b.ncols());
    let r: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(r, c);
    let mut i = 0;
    for b in blocks {
        assert_eq!(b.ncols(), c, "vstack column mismatch");
        out.view_mut((i, 0), (b.nrows(), c)).copy_from(b);
        i += b.nrows();
    }
    out
}

/// Block matrix from a row-major grid of blocks; every block in a grid row
/// shares the row height and every block in a grid column shares the width.
pub fn block(rows: &[&[&DMatrix<f64>]]) -> DMatrix<f64> {
    let stacked: Vec<DMatrix<f64>> = rows.iter().map(|r| hstack(r)).collect();
    let refs: Vec<&DMatrix<f64>> = stacked.iter().collect();
    vstack(&refs)
}

pub fn zeros(r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::zeros(r, c)
}

pub fn eye(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

/// Selector `[0 .. I .. 0]` picking `len` coordinates starting at `start`
/// out of a vector of length `total`.
pub fn selector(start: usize, len: usize, total: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(len, total);
    for i in 0..len {
        s[(i, start + i)] = 1.0;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_schur(n: usize, rng: &mut ChaCha8Rng, radius: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let r = spectral_radius(&a);
        a * (radius / r)
    }

    #[test]
    fn lyapunov_zero_dynamics() {
        let s = solve_discrete_lyapunov(&DMatrix::zeros(2, 2), &SymMatrix::identity(2)).unwrap();
        assert_relative_eq!(*s.as_matrix(), DMatrix::identity(2, 2), epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_scalar_closed_form() {
        let s = solve_discrete_lyapunov(&DMatrix::from_element(1, 1, 0.5), &SymMatrix::new(DMatrix::from_element(1, 1, 0.75)).unwrap()).unwrap();
        assert_relative_eq!(s[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_matches_truncated_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [4, 25] {
            let a = random_schur(n, &mut rng, 0.9);
            let q = SymMatrix::identity(n);
            let s = solve_discrete_lyapunov(&a, &q).unwrap();
            // truncated series sum_k (A')^k Q A^k until |A^k| < 1e-14
            let mut series = DMatrix::<f64>::zeros(n, n);
            let mut ak = DMatrix::identity(n, n);
            while ak.norm() >= 1e-14 {
                series += ak.transpose() * q.as_matrix() * &ak;
                ak = &ak * &a;
            }
            let residual = (a.transpose() * s.as_matrix() * &a - s.as_matrix() + q.as_matrix()).norm();
            assert!(residual <= 1e-9 * (1.0 + q.norm()), "residual {residual}");
            assert!((s.as_matrix() - &series).amax() <= 1e-9 * series.amax());
        }
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(solve_discrete_lyapunov(&a, &SymMatrix::identity(1)), Err(Error::NotSchurStable(_))));
        assert!(matches!(solve_discrete_lyapunov(&DMatrix::zeros(2, 2), &SymMatrix::identity(3)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn two_to_inf_examples() {
        assert_eq!(two_to_inf_norm(&DMatrix::identity(3, 3)), 1.0);
        assert_eq!(two_to_inf_norm(&DMatrix::from_row_slice(2, 2, &[3.0, 4.0, 0.0, 0.0])), 5.0);
    }

    #[test]
    fn two_to_inf_dominates_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
        let norm = two_to_inf_norm(&a);
        let mut best: f64 = 0.0;
        for _ in 0..100_000 {
            let x = DVector::<f64>::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let x = &x / x.norm();
            let v = (&a * x).amax();
            assert!(v <= norm + 1e-12);
            best = best.max(v);
        }
        assert!(norm - best < 1e-2, "sampling maximum {best} far below {norm}");
    }

    #[test]
    fn psd_margin_examples() {
        assert_relative_eq!(psd_margin(&(-DMatrix::<f64>::identity(3, 3))), -1.0, epsilon = 1e-14);
        assert_relative_eq!(psd_margin(&DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, 3.0]))), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn psd_margin_matches_cubic_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = DMatrix::<f64>::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let e = (&m + m.transpose()) * 0.5;
            // characteristic polynomial l^3 + b l^2 + c l + d, trigonometric roots
            let tr: f64 = e.trace();
            let c2 = 0.5 * (tr * tr - (&e * &e).trace());
            let det = e.determinant();
            let (b, c, d) = (-tr, c2, -det);
            let p = c - b * b / 3.0;
            let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
            let r = (-p / 3.0).sqrt();
            let phi = ((3.0 * q / (2.0 * p)) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0).acos() / 3.0;
            let roots: Vec<f64> = (0..3).map(|k| 2.0 * r * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() - b / 3.0).collect();
            let max = roots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((psd_margin(&e) - max).abs() < 1e-10);
        }
    }

    #[test]
    fn sym_matrix_rejects_asymmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-6, 1.0]);
        assert!(SymMatrix::new(m).is_err());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-14, 1.0]);
        let s = SymMatrix::new(m).unwrap();
        assert_eq!(s[(0, 1)], s[(1, 0)]);
    }

    #[test]
    fn dare_scalar() {
        // x+ = x + u, Q = R = 1: X = (1 + sqrt 5) / 2
        let (x, f) = solve_dare(&eye(1), &eye(1), &SymMatrix::identity(1), &SymMatrix::identity(1)).unwrap();
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(x[(0, 0)], golden, epsilon = 1e-10);
        assert_relative_eq!(f[(0, 0)], golden / (1.0 + golden), epsilon = 1e-10);
    }

    #[test]
    fn ellipsoid_isotropic() {
        let p = eye(2) * 3.0;
        let shape = eye(2) * 2.0; // radius 0.5
        assert_relative_eq!(max_quadratic_on_ellipsoid(&p, &shape).unwrap(), 0.75, epsilon = 1e-14);
    }
}
