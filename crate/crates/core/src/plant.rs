//! Plant, controller, filter and estimator realizations and the
//! interconnections built from them.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::serde_mat::{self, fit_empty};
use crate::numerics::{block, eye, hstack, selector, vstack, zeros};

/// Known LTI part of the uncertain system. There is deliberately no
/// `u -> y` feedthrough block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlantRaw", into = "PlantRaw")]
pub struct Plant {
    pub a: DMatrix<f64>,
    pub b_p: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub c_q: DMatrix<f64>,
    pub d_qp: DMatrix<f64>,
    pub d_qd: DMatrix<f64>,
    pub d_qu: DMatrix<f64>,
    pub c_z: DMatrix<f64>,
    pub d_zp: DMatrix<f64>,
    pub d_zd: DMatrix<f64>,
    pub d_zu: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub d_yp: DMatrix<f64>,
    pub d_yd: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PlantRaw {
    #[serde(with = "serde_mat")]
    a: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    b_p: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    b_d: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    b_u: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    c_q: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_qp: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_qd: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_qu: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    c_z: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_zp: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_zd: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_zu: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    c_y: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_yp: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_yd: DMatrix<f64>,
}

impl TryFrom<PlantRaw> for Plant {
    type Error = Error;
    fn try_from(r: PlantRaw) -> Result<Self> {
        Plant::new(
            r.a, r.b_p, r.b_d, r.b_u, r.c_q, r.d_qp, r.d_qd, r.d_qu, r.c_z, r.d_zp, r.d_zd, r.d_zu, r.c_y, r.d_yp, r.d_yd,
        )
    }
}

impl From<Plant> for PlantRaw {
    fn from(p: Plant) -> Self {
        PlantRaw {
            a: p.a,
            b_p: p.b_p,
            b_d: p.b_d,
            b_u: p.b_u,
            c_q: p.c_q,
            d_qp: p.d_qp,
            d_qd: p.d_qd,
            d_qu: p.d_qu,
            c_z: p.c_z,
            d_zp: p.d_zp,
            d_zd: p.d_zd,
            d_zu: p.d_zu,
            c_y: p.c_y,
            d_yp: p.d_yp,
            d_yd: p.d_yd,
        }
    }
}

fn widest(ms: &[&DMatrix<f64>]) -> usize {
    ms.iter().map(|m| m.ncols()).max().unwrap_or(0)
}

fn tallest(ms: &[&DMatrix<f64>]) -> usize {
    ms.iter().map(|m| m.nrows()).max().unwrap_or(0)
}

impl Plant {
    /// Builds a plant, inferring the channel sizes from the nonempty blocks.
    /// Empty blocks are replaced by zeros of the inferred shape.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b_p: DMatrix<f64>,
        b_d: DMatrix<f64>,
        b_u: DMatrix<f64>,
        c_q: DMatrix<f64>,
        d_qp: DMatrix<f64>,
        d_qd: DMatrix<f64>,
        d_qu: DMatrix<f64>,
        c_z: DMatrix<f64>,
        d_zp: DMatrix<f64>,
        d_zd: DMatrix<f64>,
        d_zu: DMatrix<f64>,
        c_y: DMatrix<f64>,
        d_yp: DMatrix<f64>,
        d_yd: DMatrix<f64>,
    ) -> Result<Self> {
        if !a.is_square() {
            return dim_err("plant A must be square");
        }
        let nx = a.nrows();
        let np = widest(&[&b_p, &d_qp, &d_zp, &d_yp]);
        let nd = widest(&[&b_d, &d_qd, &d_zd, &d_yd]);
        let nu = widest(&[&b_u, &d_qu, &d_zu]);
        let nq = tallest(&[&c_q, &d_qp, &d_qd, &d_qu]);
        let nz = tallest(&[&c_z, &d_zp, &d_zd, &d_zu]);
        let ny = tallest(&[&c_y, &d_yp, &d_yd]);
        if nu == 0 || ny == 0 {
            return dim_err("plant needs at least one input u and one output y");
        }
        Ok(Plant {
            b_p: fit_empty(b_p, nx, np, "B_p")?,
            b_d: fit_empty(b_d, nx, nd, "B_d")?,
            b_u: fit_empty(b_u, nx, nu, "B_u")?,
            c_q: fit_empty(c_q, nq, nx, "C_q")?,
            d_qp: fit_empty(d_qp, nq, np, "D_qp")?,
            d_qd: fit_empty(d_qd, nq, nd, "D_qd")?,
            d_qu: fit_empty(d_qu, nq, nu, "D_qu")?,
            c_z: fit_empty(c_z, nz, nx, "C_z")?,
            d_zp: fit_empty(d_zp, nz, np, "D_zp")?,
            d_zd: fit_empty(d_zd, nz, nd, "D_zd")?,
            d_zu: fit_empty(d_zu, nz, nu, "D_zu")?,
            c_y: fit_empty(c_y, ny, nx, "C_y")?,
            d_yp: fit_empty(d_yp, ny, np, "D_yp")?,
            d_yd: fit_empty(d_yd, ny, nd, "D_yd")?,
            a,
        })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_p(&self) -> usize {
        self.b_p.ncols()
    }
    pub fn n_d(&self) -> usize {
        self.b_d.ncols()
    }
    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
    pub fn n_q(&self) -> usize {
        self.c_q.nrows()
    }
    pub fn n_z(&self) -> usize {
        self.c_z.nrows()
    }
    pub fn n_y(&self) -> usize {
        self.c_y.nrows()
    }

    /// Keeps only the listed constraint rows.
    pub fn with_z_rows(&self, rows: &[usize]) -> Plant {
        let pick = |m: &DMatrix<f64>| m.select_rows(rows.iter());
        Plant { c_z: pick(&self.c_z), d_zp: pick(&self.d_zp), d_zd: pick(&self.d_zd), d_zu: pick(&self.d_zu), ..self.clone() }
    }

    /// One step of the plant equations.
    pub fn step(&self, x: &DVector<f64>, p: &DVector<f64>, d: &DVector<f64>, u: &DVector<f64>) -> Result<PlantStep> {
        check_len("x", x, self.n_x())?;
        check_len("p", p, self.n_p())?;
        check_len("d", d, self.n_d())?;
        check_len("u", u, self.n_u())?;
        Ok(PlantStep {
            x_next: &self.a * x + &self.b_p * p + &self.b_d * d + &self.b_u * u,
            q: &self.c_q * x + &self.d_qp * p + &self.d_qd * d + &self.d_qu * u,
            z: &self.c_z * x + &self.d_zp * p + &self.d_zd * d + &self.d_zu * u,
            y: &self.c_y * x + &self.d_yp * p + &self.d_yd * d,
        })
    }

    /// The part of `q` that does not depend on `p` (needed to resolve
    /// the algebraic loop through `D_qp` when `p` depends on `q`).
    pub fn q_without_p(&self, x: &DVector<f64>, d: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c_q * x + &self.d_qd * d + &self.d_qu * u
    }
}

#[derive(Debug, Clone)]
pub struct PlantStep {
    pub x_next: DVector<f64>,
    pub q: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

fn check_len(name: &str, v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return dim_err(format!("{name}: expected length {n}, got {}", v.len()));
    }
    Ok(())
}

/// Dynamic output-feedback controller `kappa+ = A kappa + B y`,
/// `u = C kappa + D y (+ u_mpc)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ControllerRaw", into = "ControllerRaw")]
pub struct Controller {
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub c_k: DMatrix<f64>,
    pub d_k: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ControllerRaw {
    #[serde(with = "serde_mat")]
    a_k: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    b_k: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    c_k: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    d_k: DMatrix<f64>,
}

impl TryFrom<ControllerRaw> for Controller {
    type Error = Error;
    fn try_from(r: ControllerRaw) -> Result<Self> {
        Controller::new(r.a_k, r.b_k, r.c_k, r.d_k)
    }
}

impl From<Controller> for ControllerRaw {
    fn from(k: Controller) -> Self {
        ControllerRaw { a_k: k.a_k, b_k: k.b_k, c_k: k.c_k, d_k: k.d_k }
    }
}

impl Controller {
    pub fn new(a_k: DMatrix<f64>, b_k: DMatrix<f64>, c_k: DMatrix<f64>, d_k: DMatrix<f64>) -> Result<Self> {
        if !a_k.is_square() {
            return dim_err("controller A_K must be square");
        }
        let nk = a_k.nrows();
        let (nu, ny) = d_k.shape();
        Ok(Controller { b_k: fit_empty(b_k, nk, ny, "B_K")?, c_k: fit_empty(c_k, nu, nk, "C_K")?, a_k, d_k })
    }

    /// Memoryless feedback `u = D y`.
    pub fn static_gain(d_k: DMatrix<f64>) -> Self {
        let (nu, ny) = d_k.shape();
        Controller { a_k: zeros(0, 0), b_k: zeros(0, ny), c_k: zeros(nu, 0), d_k }
    }

    pub fn n_kappa(&self) -> usize {
        self.a_k.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.d_k.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.d_k.ncols()
    }

    /// Returns `(kappa_next, C kappa + D y)`.
    pub fn step(&self, kappa: &DVector<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_len("kappa", kappa, self.n_kappa())?;
        check_len("y", y, self.n_y())?;
        Ok((&self.a_k * kappa + &self.b_k * y, &self.c_k * kappa + &self.d_k * y))
    }
}

/// IQC filter `psi+ = A psi + Bq q + Bp p`, `s = C psi + Dq q + Dp p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    #[serde(with = "serde_mat")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub b_q: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub b_p: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub c_s: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub d_sq: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub d_sp: DMatrix<f64>,
}

impl Filter {
    pub fn new(
        a: DMatrix<f64>,
        b_q: DMatrix<f64>,
        b_p: DMatrix<f64>,
        c_s: DMatrix<f64>,
        d_sq: DMatrix<f64>,
        d_sp: DMatrix<f64>,
    ) -> Result<Self> {
        let npsi = a.nrows();
        let (ns, nq) = d_sq.shape();
        let np = d_sp.ncols();
        if !a.is_square() || d_sp.nrows() != ns {
            return dim_err("filter: inconsistent A or D blocks");
        }
        Ok(Filter {
            b_q: fit_empty(b_q, npsi, nq, "filter B_q")?,
            b_p: fit_empty(b_p, npsi, np, "filter B_p")?,
            c_s: fit_empty(c_s, ns, npsi, "filter C_s")?,
            a,
            d_sq,
            d_sp,
        })
    }

    /// Stateless filter `s = [q; p]`.
    pub fn passthrough(nq: usize, np: usize) -> Self {
        let d_sq = vstack(&[&eye(nq), &zeros(np, nq)]);
        let d_sp = vstack(&[&zeros(nq, np), &eye(np)]);
        Filter { a: zeros(0, 0), b_q: zeros(0, nq), b_p: zeros(0, np), c_s: zeros(nq + np, 0), d_sq, d_sp }
    }

    pub fn n_psi(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_s(&self) -> usize {
        self.d_sq.nrows()
    }
    pub fn n_q(&self) -> usize {
        self.d_sq.ncols()
    }
    pub fn n_p(&self) -> usize {
        self.d_sp.ncols()
    }

    /// Returns `(psi_next, s)`.
    pub fn step(&self, psi: &DVector<f64>, q: &DVector<f64>, p: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_len("psi", psi, self.n_psi())?;
        check_len("q", q, self.n_q())?;
        check_len("p", p, self.n_p())?;
        Ok((&self.a * psi + &self.b_q * q + &self.b_p * p, &self.c_s * psi + &self.d_sq * q + &self.d_sp * p))
    }
}

/// Estimator `lambda+ = A lambda + B dy`, `est = C lambda + D dy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    #[serde(with = "serde_mat")]
    pub a_l: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub b_l: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub c_l: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    pub d_l: DMatrix<f64>,
}

impl Estimator {
    pub fn new(a_l: DMatrix<f64>, b_l: DMatrix<f64>, c_l: DMatrix<f64>, d_l: DMatrix<f64>) -> Result<Self> {
        let n = a_l.nrows();
        let (no, ny) = d_l.shape();
        if !a_l.is_square() || b_l.shape() != (n, ny) || c_l.shape() != (no, n) {
            return dim_err("estimator: inconsistent blocks");
        }
        Ok(Estimator { a_l, b_l, c_l, d_l })
    }

    pub fn zero(n_lambda: usize, n_theta: usize, n_y: usize) -> Self {
        Estimator { a_l: zeros(n_lambda, n_lambda), b_l: zeros(n_lambda, n_y), c_l: zeros(n_theta, n_lambda), d_l: zeros(n_theta, n_y) }
    }

    pub fn n_lambda(&self) -> usize {
        self.a_l.nrows()
    }
    pub fn n_out(&self) -> usize {
        self.d_l.nrows()
    }
    pub fn n_y(&self) -> usize {
        self.d_l.ncols()
    }

    /// Returns `(lambda_next, estimate)`.
    pub fn step(&self, lambda: &DVector<f64>, dy: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_len("lambda", lambda, self.n_lambda())?;
        check_len("dy", dy, self.n_y())?;
        Ok((&self.a_l * lambda + &self.b_l * dy, &self.c_l * lambda + &self.d_l * dy))
    }
}

/// Signal channel labels of partitioned interconnection matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    /// The state row/column block.
    State,
    /// Uncertainty output fed back into the plant.
    P,
    /// External disturbance.
    D,
    /// MPC input.
    U,
    /// Stacked `[q; d]` performance input of error systems.
    W,
    /// Uncertainty input.
    Q,
    /// Filter output.
    S,
    /// Constraint output.
    Z,
    /// Measured output.
    Y,
    /// Estimation performance output.
    Zo,
}

/// A state-space matrix `[A B_*; C_* D_**]` with labeled input and output
/// channel partitions. Loop-transformed systems carry their `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct Interconnection {
    matrix: DMatrix<f64>,
    n_state: usize,
    n_psi: usize,
    inputs: Vec<(Channel, usize)>,
    outputs: Vec<(Channel, usize)>,
    rho: Option<f64>,
}

pub type Signals = BTreeMap<Channel, DVector<f64>>;

impl Interconnection {
    pub fn new(
        matrix: DMatrix<f64>,
        n_state: usize,
        n_psi: usize,
        inputs: Vec<(Channel, usize)>,
        outputs: Vec<(Channel, usize)>,
        rho: Option<f64>,
    ) -> Result<Self> {
        let r = n_state + outputs.iter().map(|o| o.1).sum::<usize>();
        let c = n_state + inputs.iter().map(|i| i.1).sum::<usize>();
        if matrix.shape() != (r, c) {
            return dim_err(format!("interconnection partitions sum to {r}x{c}, matrix is {}x{}", matrix.nrows(), matrix.ncols()));
        }
        if n_psi > n_state {
            return dim_err("filter state larger than total state");
        }
        Ok(Interconnection { matrix, n_state, n_psi, inputs, outputs, rho })
    }

    fn from_blocks(
        rows: &[(Channel, Vec<DMatrix<f64>>)],
        n_state: usize,
        n_psi: usize,
        inputs: Vec<(Channel, usize)>,
        rho: Option<f64>,
    ) -> Result<Self> {
        let grid: Vec<Vec<&DMatrix<f64>>> = rows.iter().map(|r| r.1.iter().collect()).collect();
        let refs: Vec<&[&DMatrix<f64>]> = grid.iter().map(|r| r.as_slice()).collect();
        let m = block(&refs);
        let outputs = rows.iter().skip(1).map(|r| (r.0, r.1[0].nrows())).collect();
        Interconnection::new(m, n_state, n_psi, inputs, outputs, rho)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn n_state(&self) -> usize {
        self.n_state
    }
    /// Leading filter-state coordinates (0 for plant-controller loops).
    pub fn n_psi(&self) -> usize {
        self.n_psi
    }
    pub fn rho(&self) -> Option<f64> {
        self.rho
    }
    pub fn inputs(&self) -> &[(Channel, usize)] {
        &self.inputs
    }
    pub fn outputs(&self) -> &[(Channel, usize)] {
        &self.outputs
    }

    fn col_range(&self, ch: Channel) -> Result<(usize, usize)> {
        if ch == Channel::State {
            return Ok((0, self.n_state));
        }
        let mut off = self.n_state;
        for &(c, n) in &self.inputs {
            if c == ch {
                return Ok((off, n));
            }
            off += n;
        }
        dim_err(format!("no input channel {ch:?}"))
    }

    fn row_range(&self, ch: Channel) -> Result<(usize, usize)> {
        if ch == Channel::State {
            return Ok((0, self.n_state));
        }
        let mut off = self.n_state;
        for &(c, n) in &self.outputs {
            if c == ch {
                return Ok((off, n));
            }
            off += n;
        }
        dim_err(format!("no output channel {ch:?}"))
    }

    pub fn in_dim(&self, ch: Channel) -> usize {
        self.col_range(ch).map_or(0, |r| r.1)
    }

    pub fn out_dim(&self, ch: Channel) -> usize {
        self.row_range(ch).map_or(0, |r| r.1)
    }

    /// Block from input `inp` to output `out` (use `Channel::State` for
    /// the state row or column). Panics on an unknown channel.
    pub fn block(&self, out: Channel, inp: Channel) -> DMatrix<f64> {
        let (r0, r) = self.row_range(out).expect("unknown output channel");
        let (c0, c) = self.col_range(inp).expect("unknown input channel");
        self.matrix.view((r0, c0), (r, c)).into_owned()
    }

    /// Row block of `out` against the listed inputs, concatenated.
    pub fn row(&self, out: Channel, inps: &[Channel]) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = inps.iter().map(|&i| self.block(out, i)).collect();
        let refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
        hstack(&refs)
    }

    pub fn a(&self) -> DMatrix<f64> {
        self.block(Channel::State, Channel::State)
    }

    /// Exact affine update. Missing inputs are zero.
    pub fn step(&self, x: &DVector<f64>, inputs: &[(Channel, &DVector<f64>)]) -> Result<(DVector<f64>, Signals)> {
        check_len("state", x, self.n_state)?;
        let mut v = DVector::zeros(self.matrix.ncols());
        v.rows_mut(0, self.n_state).copy_from(x);
        for (ch, val) in inputs {
            let (c0, n) = self.col_range(*ch)?;
            check_len(&format!("{ch:?}"), val, n)?;
            v.rows_mut(c0, n).copy_from(val);
        }
        let out = &self.matrix * v;
        let mut signals = Signals::new();
        let mut off = self.n_state;
        for &(c, n) in &self.outputs {
            signals.insert(c, out.rows(off, n).into_owned());
            off += n;
        }
        Ok((out.rows(0, self.n_state).into_owned(), signals))
    }

    /// Keeps only the listed rows of output channel `ch`.
    pub fn with_output_rows(&self, ch: Channel, rows: &[usize]) -> Result<Interconnection> {
        let (r0, n) = self.row_range(ch)?;
        if rows.iter().any(|&r| r >= n) {
            return dim_err("row index out of range");
        }
        let mut keep: Vec<usize> = (0..r0).collect();
        keep.extend(rows.iter().map(|r| r0 + r));
        keep.extend(r0 + n..self.matrix.nrows());
        let outputs = self.outputs.iter().map(|&(c, m)| if c == ch { (c, rows.len()) } else { (c, m) }).collect();
        Interconnection::new(self.matrix.select_rows(keep.iter()), self.n_state, self.n_psi, self.inputs.clone(), outputs, self.rho)
    }

    /// Multiplies output channel `ch` by `sigma`.
    pub fn with_output_scaled(&self, ch: Channel, sigma: f64) -> Result<Interconnection> {
        let (r0, n) = self.row_range(ch)?;
        let mut out = self.clone();
        out.matrix.rows_mut(r0, n).scale_mut(sigma);
        Ok(out)
    }
}

/// Closed loop of plant and controller with state `theta = [x; kappa]`,
/// inputs `(p, d, u_mpc)` and outputs `(q, z, y)`.
pub fn close_controller(g: &Plant, k: &Controller) -> Result<Interconnection> {
    if k.n_y() != g.n_y() || k.n_u() != g.n_u() {
        return dim_err(format!(
            "controller maps {} outputs to {} inputs, plant has {} outputs and {} inputs",
            k.n_y(),
            k.n_u(),
            g.n_y(),
            g.n_u()
        ));
    }
    let nk = k.n_kappa();
    let (bu, dk, cy) = (&g.b_u, &k.d_k, &g.c_y);
    let state_row = vec![
        &g.a + bu * dk * cy,
        bu * &k.c_k,
        &g.b_p + bu * dk * &g.d_yp,
        &g.b_d + bu * dk * &g.d_yd,
        bu.clone(),
    ];
    let kappa_row = vec![&k.b_k * cy, k.a_k.clone(), &k.b_k * &g.d_yp, &k.b_k * &g.d_yd, zeros(nk, g.n_u())];
    let out_row = |c: &DMatrix<f64>, dp: &DMatrix<f64>, dd: &DMatrix<f64>, du: &DMatrix<f64>| -> Vec<DMatrix<f64>> {
        vec![c + du * dk * cy, du * &k.c_k, dp + du * dk * &g.d_yp, dd + du * dk * &g.d_yd, du.clone()]
    };
    let state: Vec<DMatrix<f64>> = state_row.iter().zip(&kappa_row).map(|(a, b)| vstack(&[a, b])).collect();
    let rows = vec![
        (Channel::State, state),
        (Channel::Q, out_row(&g.c_q, &g.d_qp, &g.d_qd, &g.d_qu)),
        (Channel::Z, out_row(&g.c_z, &g.d_zp, &g.d_zd, &g.d_zu)),
        (Channel::Y, vec![g.c_y.clone(), zeros(g.n_y(), nk), g.d_yp.clone(), g.d_yd.clone(), zeros(g.n_y(), g.n_u())]),
    ];
    let inputs = vec![(Channel::P, g.n_p()), (Channel::D, g.n_d()), (Channel::U, g.n_u())];
    Interconnection::from_blocks(&rows, g.n_x() + nk, 0, inputs, None)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidParameter(format!("rho must lie in (0, 1), got {rho}")));
    }
    Ok(())
}

/// Loop-transformed error system with state `chi = [psi; theta_bar]`,
/// inputs `(p, w = [q; d])` and outputs `(s, z, y)`.
pub fn augment_filter(gk: &Interconnection, psi: &Filter, rho: f64) -> Result<Interconnection> {
    check_rho(rho)?;
    if gk.rho().is_some() || gk.n_psi() != 0 {
        return Err(Error::InvalidParameter("augment_filter expects an unscaled plant-controller loop".into()));
    }
    use Channel::*;
    let (nq, np) = (gk.out_dim(Q), gk.in_dim(P));
    if psi.n_q() != nq || psi.n_p() != np {
        return dim_err(format!("filter expects q/p sizes {}/{}, loop has {nq}/{np}", psi.n_q(), psi.n_p()));
    }
    let (nt, npsi, nd) = (gk.n_state(), psi.n_psi(), gk.in_dim(D));
    let inv = 1.0 / rho;
    let (cq, dqp, dqd) = (gk.block(Q, State), gk.block(Q, P), gk.block(Q, D));
    let psi_row =
        vec![psi.a.clone(), &psi.b_q * &cq, &psi.b_p + &psi.b_q * &dqp, psi.b_q.clone(), &psi.b_q * &dqd];
    let theta_row = vec![zeros(nt, npsi), gk.a() * inv, gk.block(State, P) * inv, zeros(nt, nq), gk.block(State, D) * inv];
    let state: Vec<DMatrix<f64>> = psi_row.iter().zip(&theta_row).map(|(a, b)| vstack(&[a, b])).collect();
    let s_row = vec![psi.c_s.clone(), &psi.d_sq * &cq, &psi.d_sp + &psi.d_sq * &dqp, psi.d_sq.clone(), &psi.d_sq * &dqd];
    let plain = |ch: Channel| -> Vec<DMatrix<f64>> {
        let n = gk.out_dim(ch);
        vec![zeros(n, npsi), gk.block(ch, State), gk.block(ch, P), zeros(n, nq), gk.block(ch, D)]
    };
    // merge the q and d columns into the stacked w input
    let merge = |row: Vec<DMatrix<f64>>| -> Vec<DMatrix<f64>> {
        vec![hstack(&[&row[0], &row[1]]), row[2].clone(), hstack(&[&row[3], &row[4]])]
    };
    let rows = vec![(State, merge(state)), (S, merge(s_row)), (Z, merge(plain(Z))), (Y, merge(plain(Y)))];
    let inputs = vec![(P, np), (W, nq + nd)];
    Interconnection::from_blocks(&rows, npsi + nt, npsi, inputs, Some(rho))
}

/// Estimation error system with state `xi = [psi; dtheta_bar; lambda_bar]`,
/// inputs `(p, w)` and outputs `(s, zo)`.
pub fn augment_estimator(sigma: &Interconnection, l: &Estimator, rho: f64) -> Result<Interconnection> {
    check_rho(rho)?;
    use Channel::*;
    match sigma.rho() {
        Some(r) if (r - rho).abs() <= 1e-15 => {}
        _ => return Err(Error::InvalidParameter("estimator augmentation needs the matching loop-transformed system".into())),
    }
    let (nchi, npsi) = (sigma.n_state(), sigma.n_psi());
    let nt = nchi - npsi;
    let ny = sigma.out_dim(Y);
    if l.n_y() != ny || l.n_out() != nt {
        return dim_err(format!("estimator maps {} -> {}, need {ny} -> {nt}", l.n_y(), l.n_out()));
    }
    let nl = l.n_lambda();
    let inv = 1.0 / rho;
    let (bl, al) = (&l.b_l * inv, &l.a_l * inv);
    let (cy, dyp, dyw) = (sigma.block(Y, State), sigma.block(Y, P), sigma.block(Y, W));
    let np = sigma.in_dim(P);
    let nw = sigma.in_dim(W);
    let ns = sigma.out_dim(S);
    let rows = vec![
        (
            State,
            vec![
                block(&[&[&sigma.a(), &zeros(nchi, nl)], &[&(&bl * &cy), &al]]),
                vstack(&[&sigma.block(State, P), &(&bl * &dyp)]),
                vstack(&[&sigma.block(State, W), &(&bl * &dyw)]),
            ],
        ),
        (S, vec![hstack(&[&sigma.block(S, State), &zeros(ns, nl)]), sigma.block(S, P), sigma.block(S, W)]),
        (
            Zo,
            vec![
                block(&[
                    &[&selector(0, npsi, nchi), &zeros(npsi, nl)],
                    &[&(selector(npsi, nt, nchi) - &l.d_l * &cy), &(-&l.c_l)],
                ]),
                vstack(&[&zeros(npsi, np), &(-&l.d_l * &dyp)]),
                vstack(&[&zeros(npsi, nw), &(-&l.d_l * &dyw)]),
            ],
        ),
    ];
    Interconnection::from_blocks(&rows, nchi + nl, npsi, vec![(P, np), (W, nw)], Some(rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::two_state_plant;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_controller(rng: &mut ChaCha8Rng, nk: usize, nu: usize, ny: usize) -> Controller {
        Controller::new(rand_mat(rng, nk, nk), rand_mat(rng, nk, ny), rand_mat(rng, nu, nk), rand_mat(rng, nu, ny)).unwrap()
    }

    /// Builds the closed-loop matrix column by column by driving the
    /// separate plant and controller equations with unit vectors.
    fn closed_loop_by_probing(g: &Plant, k: &Controller) -> DMatrix<f64> {
        let (nx, nk) = (g.n_x(), k.n_kappa());
        let ncols = nx + nk + g.n_p() + g.n_d() + g.n_u();
        let nrows = nx + nk + g.n_q() + g.n_z() + g.n_y();
        let mut m = DMatrix::zeros(nrows, ncols);
        for j in 0..ncols {
            let mut e = DVector::zeros(ncols);
            e[j] = 1.0;
            let x = e.rows(0, nx).into_owned();
            let kap = e.rows(nx, nk).into_owned();
            let p = e.rows(nx + nk, g.n_p()).into_owned();
            let d = e.rows(nx + nk + g.n_p(), g.n_d()).into_owned();
            let umpc = e.rows(nx + nk + g.n_p() + g.n_d(), g.n_u()).into_owned();
            // y does not depend on u, so evaluate it first
            let y = g.step(&x, &p, &d, &DVector::zeros(g.n_u())).unwrap().y;
            let (kn, ufb) = k.step(&kap, &y).unwrap();
            let out = g.step(&x, &p, &d, &(ufb + umpc)).unwrap();
            let col = vstack(&[
                &DMatrix::from_column_slice(nx, 1, out.x_next.as_slice()),
                &DMatrix::from_column_slice(nk, 1, kn.as_slice()),
                &DMatrix::from_column_slice(g.n_q(), 1, out.q.as_slice()),
                &DMatrix::from_column_slice(g.n_z(), 1, out.z.as_slice()),
                &DMatrix::from_column_slice(g.n_y(), 1, out.y.as_slice()),
            ]);
            m.set_column(j, &col.column(0));
        }
        m
    }

    #[test]
    fn decoupled_controller() {
        let g = two_state_plant();
        let ak = DMatrix::from_row_slice(1, 1, &[0.3]);
        let k = Controller::new(ak.clone(), zeros(1, 2), zeros(1, 1), zeros(1, 2)).unwrap();
        let gk = close_controller(&g, &k).unwrap();
        assert_eq!(gk.a(), crate::numerics::block_diag(&[&g.a, &ak]));
        assert_eq!(gk.block(Channel::Q, Channel::State), hstack(&[&g.c_q, &zeros(1, 1)]));
    }

    #[test]
    fn static_controller_reduces() {
        let g = two_state_plant();
        let dk = DMatrix::from_row_slice(1, 2, &[-0.5, -1.0]);
        let gk = close_controller(&g, &Controller::static_gain(dk.clone())).unwrap();
        assert_eq!(gk.n_state(), 2);
        let expect = &g.a + &g.b_u * &dk * &g.c_y;
        assert!((gk.a() - expect).amax() < 1e-15);
    }

    #[test]
    fn closed_loop_matches_probing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = two_state_plant();
        for nk in [0, 1, 3] {
            let k = rand_controller(&mut rng, nk, 1, 2);
            let gk = close_controller(&g, &k).unwrap();
            let oracle = closed_loop_by_probing(&g, &k);
            assert!((gk.matrix() - oracle).amax() < 1e-14);
            assert!(gk.block(Channel::Y, Channel::U).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn passthrough_filter_gives_plain_loop() {
        let g = two_state_plant();
        let k = Controller::static_gain(DMatrix::from_row_slice(1, 2, &[-0.2, -0.4]));
        let gk = close_controller(&g, &k).unwrap();
        let rho = 0.9;
        let sig = augment_filter(&gk, &Filter::passthrough(1, 1), rho).unwrap();
        assert_eq!(sig.n_state(), gk.n_state());
        assert!((sig.a() - gk.a() / rho).amax() < 1e-15);
        let s_theta = sig.block(Channel::S, Channel::State);
        assert_eq!(s_theta.rows(0, 1).into_owned(), gk.block(Channel::Q, Channel::State));
        assert!(s_theta.rows(1, 1).iter().all(|&v| v == 0.0));
        assert_eq!(sig.block(Channel::S, Channel::P), DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn zero_plant_leaves_only_filter_blocks() {
        let z = |r, c| zeros(r, c);
        let g = Plant::new(z(2, 2), z(2, 1), z(2, 1), z(2, 1), z(1, 2), z(1, 1), z(1, 1), z(1, 1), z(1, 2), z(1, 1), z(1, 1), z(1, 1), z(1, 2), z(1, 1), z(1, 1)).unwrap();
        let gk = close_controller(&g, &Controller::static_gain(z(1, 1))).unwrap();
        let f = crate::iqc::basis_filter(1, 1, 1, 0.5).unwrap();
        let sig = augment_filter(&gk, &f, 0.8).unwrap();
        let npsi = f.n_psi();
        let a = sig.a();
        assert_eq!(a.view((0, 0), (npsi, npsi)).into_owned(), f.a);
        assert!(a.view((npsi, 0), (2, npsi + 2)).iter().all(|&v| v == 0.0));
        assert!(sig.block(Channel::Z, Channel::State).iter().all(|&v| v == 0.0));
        assert_eq!(sig.block(Channel::State, Channel::P).rows(0, npsi).into_owned(), f.b_p);
    }

    #[test]
    fn zero_estimator_output_is_state_copy() {
        let g = two_state_plant();
        let gk = close_controller(&g, &Controller::static_gain(DMatrix::from_row_slice(1, 2, &[-0.2, -0.4]))).unwrap();
        let sig = augment_filter(&gk, &crate::iqc::basis_filter(1, 1, 1, 0.4).unwrap(), 0.85).unwrap();
        let nchi = sig.n_state();
        let xi = augment_estimator(&sig, &Estimator::zero(nchi, 2, 2), 0.85).unwrap();
        let c = xi.block(Channel::Zo, Channel::State);
        assert_eq!(c.columns(0, nchi).into_owned(), eye(nchi));
        assert!(c.columns(nchi, nchi).iter().all(|&v| v == 0.0));
        assert!(xi.block(Channel::Zo, Channel::P).iter().all(|&v| v == 0.0));

        // C_L = I, everything else zero: second block is dtheta - lambda
        let mut l = Estimator::zero(2, 2, 2);
        l.c_l = eye(2);
        let sig0 = augment_filter(&gk, &Filter::passthrough(1, 1), 0.85).unwrap();
        let xi = augment_estimator(&sig0, &l, 0.85).unwrap();
        let c = xi.block(Channel::Zo, Channel::State);
        assert_eq!(c, hstack(&[&eye(2), &(-eye(2))]));
    }

    #[test]
    fn step_identity_and_zero() {
        let g = two_state_plant();
        let gk = close_controller(&g, &Controller::static_gain(DMatrix::from_row_slice(1, 2, &[-0.2, -0.4]))).unwrap();
        let (x, out) = gk.step(&DVector::zeros(2), &[]).unwrap();
        assert_eq!(x, DVector::zeros(2));
        assert!(out.values().all(|v| v.iter().all(|&e| e == 0.0)));

        let m = block(&[&[&eye(2), &zeros(2, 1)], &[&zeros(1, 2), &zeros(1, 1)]]);
        let sys = Interconnection::new(m, 2, 0, vec![(Channel::U, 1)], vec![(Channel::Y, 1)], None).unwrap();
        let mut s = DVector::from_vec(vec![1.0, 0.0]);
        for _ in 0..10 {
            s = sys.step(&s, &[]).unwrap().0;
        }
        assert_eq!(s, DVector::from_vec(vec![1.0, 0.0]));
        assert!(sys.step(&DVector::zeros(3), &[]).is_err());
    }

    #[test]
    fn free_response_matches_modal_closed_form() {
        use nalgebra::Complex;
        let g = two_state_plant();
        let a = &g.a;
        let gk = close_controller(&g, &Controller::static_gain(zeros(1, 2))).unwrap();
        let x0 = DVector::from_vec(vec![0.3, -0.7]);
        // eigenpairs of a 2x2 matrix with complex spectrum
        let tr = a.trace();
        let det = a.determinant();
        let disc = Complex::new(tr * tr - 4.0 * det, 0.0).sqrt();
        let l1 = (Complex::new(tr, 0.0) + disc) / 2.0;
        let l2 = (Complex::new(tr, 0.0) - disc) / 2.0;
        let v = |l: Complex<f64>| [Complex::new(a[(0, 1)], 0.0), l - a[(0, 0)]];
        let (v1, v2) = (v(l1), v(l2));
        // solve x0 = c1 v1 + c2 v2
        let detv = v1[0] * v2[1] - v2[0] * v1[1];
        let c1 = (Complex::new(x0[0], 0.0) * v2[1] - v2[0] * x0[1]) / detv;
        let c2 = (v1[0] * x0[1] - Complex::new(x0[0], 0.0) * v1[1]) / detv;
        let mut x = x0.clone();
        for k in 1..=20 {
            x = gk.step(&x, &[]).unwrap().0;
            let p1 = l1.powu(k);
            let p2 = l2.powu(k);
            for i in 0..2 {
                let e = c1 * p1 * v1[i] + c2 * p2 * v2[i];
                assert_relative_eq!(x[i], e.re, epsilon = 1e-10);
                assert!(e.im.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn row_restriction_and_scaling() {
        let g = two_state_plant();
        let gk = close_controller(&g, &Controller::static_gain(DMatrix::from_row_slice(1, 2, &[-0.2, -0.4]))).unwrap();
        let r = gk.with_output_rows(Channel::Z, &[2, 0]).unwrap();
        assert_eq!(r.out_dim(Channel::Z), 2);
        let full = gk.block(Channel::Z, Channel::State);
        assert_eq!(r.block(Channel::Z, Channel::State).row(0), full.row(2));
        assert_eq!(r.block(Channel::Y, Channel::State), gk.block(Channel::Y, Channel::State));
        let s = gk.with_output_scaled(Channel::Z, 2.0).unwrap();
        assert_eq!(s.block(Channel::Z, Channel::U), gk.block(Channel::Z, Channel::U) * 2.0);
    }

    #[test]
    fn plant_json_round_trip_and_empty_blocks() {
        let g = two_state_plant();
        let js = serde_json::to_string(&g).unwrap();
        let back: Plant = serde_json::from_str(&js).unwrap();
        assert_eq!(back, g);
        let k = Controller::static_gain(DMatrix::from_row_slice(1, 2, &[-0.2, -0.4]));
        let back: Controller = serde_json::from_str(&serde_json::to_string(&k).unwrap()).unwrap();
        assert_eq!(back, k);
        assert_eq!(back.b_k.shape(), (0, 2));
    }

    #[test]
    fn rejects_bad_rho_and_dimensions() {
        let g = two_state_plant();
        let gk = close_controller(&g, &Controller::static_gain(zeros(1, 2))).unwrap();
        assert!(augment_filter(&gk, &Filter::passthrough(1, 1), 1.0).is_err());
        assert!(augment_filter(&gk, &Filter::passthrough(2, 1), 0.5).is_err());
        assert!(close_controller(&g, &Controller::static_gain(zeros(1, 3))).is_err());
    }
}
