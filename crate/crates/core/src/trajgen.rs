//! Polynomial trajectory parametrization and the equality-constrained
//! setpoint QP shared by the autoencoder decoder, the expert generator and
//! the safety filter.
//!
//! Basis functions are monomials in normalized time s = t/(n·dt) ∈ [0, 1]
//! with exact physical-time derivative scaling (1/T per order). Raw
//! monomials in t blow the Gram conditioning past f64 for degree 10 over a
//! 10 s horizon; the normalized basis keeps every KKT system solvable to the
//! residual targets while waypoints and derivatives stay in physical units.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::linalg::{self, LuFactors};
use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Basis matrix triple: values, first and second time derivatives.
#[derive(Debug, Clone)]
pub struct BasisMatrices {
    /// (n+1)×(m+1), `w[k][i] = (k/n)^i`.
    pub w: Tensor,
    /// Exact d/dt of `w`'s basis functions at the sample times.
    pub wdot: Tensor,
    /// Exact d²/dt² of `w`'s basis functions.
    pub wddot: Tensor,
    pub n: usize,
    pub m: usize,
    pub dt: f64,
}

impl BasisMatrices {
    /// Horizon length in seconds.
    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.dt
    }

    /// Coefficient count per axis.
    pub fn coeffs(&self) -> usize {
        self.m + 1
    }

    /// Block-diagonal stacking of `w` over both axes, mapping ξ=(c_x, c_y)
    /// to the flat waypoint vector (x-block then y-block).
    pub fn w_stacked(&self) -> Tensor {
        Tensor::block_diag(&[&self.w, &self.w])
    }
}

/// Build the basis for `n` steps of `dt` seconds with degree `m`.
pub fn build_basis(n: usize, m: usize, dt: f64) -> Result<BasisMatrices> {
    if n < 2 || m < 1 || !(dt > 0.0) {
        return Err(CoreError::Contract(format!(
            "degenerate basis sizes: n={n}, m={m}, dt={dt}"
        )));
    }
    let horizon = n as f64 * dt;
    let cols = m + 1;
    let mut w = Tensor::zeros(&[n + 1, cols]);
    let mut wdot = Tensor::zeros(&[n + 1, cols]);
    let mut wddot = Tensor::zeros(&[n + 1, cols]);
    for k in 0..=n {
        let s = k as f64 / n as f64;
        for i in 0..cols {
            w.set(k, i, math::powi(s, i));
            if i >= 1 {
                wdot.set(k, i, i as f64 * math::powi(s, i - 1) / horizon);
            }
            if i >= 2 {
                wddot.set(k, i, (i * (i - 1)) as f64 * math::powi(s, i - 2) / (horizon * horizon));
            }
        }
    }
    Ok(BasisMatrices { w, wdot, wddot, n, m, dt })
}

/// Desired forward speed and lateral offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoints {
    pub v_d: f64,
    pub y_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Terminal derivative pin: `order` ∈ {1, 2}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerminalPin {
    pub axis: Axis,
    pub order: usize,
    pub value: f64,
}

/// Initial state plus the configurable set of terminal derivative pins.
/// Terminal positions stay free so the setpoints keep their meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryConditions {
    pub start_pos: (f64, f64),
    pub start_vel: (f64, f64),
    pub start_acc: (f64, f64),
    pub terminal: Vec<TerminalPin>,
}

impl BoundaryConditions {
    /// Default pins: terminal ẍ, ẏ and ÿ forced to zero.
    pub fn new(start_pos: (f64, f64), start_vel: (f64, f64), start_acc: (f64, f64)) -> Self {
        Self {
            start_pos,
            start_vel,
            start_acc,
            terminal: vec![
                TerminalPin { axis: Axis::X, order: 2, value: 0.0 },
                TerminalPin { axis: Axis::Y, order: 1, value: 0.0 },
                TerminalPin { axis: Axis::Y, order: 2, value: 0.0 },
            ],
        }
    }

    pub fn at_rest(pos: (f64, f64)) -> Self {
        Self::new(pos, (0.0, 0.0), (0.0, 0.0))
    }

    /// Equality rows in the fixed order: six initial rows then the pins.
    pub fn row_count(&self) -> usize {
        6 + self.terminal.len()
    }
}

/// PD gains of the tracking costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpGains {
    pub kappa_p: f64,
    pub kappa_v: f64,
}

impl Default for QpGains {
    /// κ_p = 1 with critical damping κ_v = 2√κ_p.
    fn default() -> Self {
        Self { kappa_p: 1.0, kappa_v: 2.0 }
    }
}

/// Assembled QP: min ½ξᵀQξ + qᵀξ subject to Aξ = b.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q_mat: Tensor,
    pub q_vec: Tensor,
    pub a_mat: Tensor,
    pub b_vec: Tensor,
}

/// Tracking residual maps. The acceleration is driven toward the
/// *convergent* PD law (−κ_p e − κ_v ė); a residual with the opposite sign
/// would reward divergence from the setpoints. Zero gains disable the
/// corresponding tracking cost entirely.
fn tracking_rows(basis: &BasisMatrices, gains: &QpGains) -> (Option<Tensor>, Option<Tensor>) {
    let r_v = if gains.kappa_p != 0.0 {
        Some(basis.wddot.add(&basis.wdot.scale(gains.kappa_p)))
    } else {
        None
    };
    let r_l = if gains.kappa_p != 0.0 || gains.kappa_v != 0.0 {
        Some(
            basis
                .wddot
                .add(&basis.wdot.scale(gains.kappa_v))
                .add(&basis.w.scale(gains.kappa_p)),
        )
    } else {
        None
    };
    (r_v, r_l)
}

/// Linear map from p=(v_d, y_d) to the QP's linear term q.
pub fn setpoint_jacobian(basis: &BasisMatrices, gains: &QpGains) -> Tensor {
    let mcols = basis.coeffs();
    let (r_v, r_l) = tracking_rows(basis, gains);
    let mut jac = Tensor::zeros(&[2 * mcols, 2]);
    if let Some(r_v) = r_v {
        let col = r_v.transpose().matmul(&Tensor::ones(&[basis.n + 1])).scale(-gains.kappa_p);
        for i in 0..mcols {
            jac.set(i, 0, col.data()[i]);
        }
    }
    if let Some(r_l) = r_l {
        let col = r_l.transpose().matmul(&Tensor::ones(&[basis.n + 1])).scale(-gains.kappa_p);
        for i in 0..mcols {
            jac.set(mcols + i, 1, col.data()[i]);
        }
    }
    jac
}

fn equality_rows(basis: &BasisMatrices, bc: &BoundaryConditions) -> (Tensor, Tensor) {
    let mcols = basis.coeffs();
    let rows = bc.row_count();
    let mut a = Tensor::zeros(&[rows, 2 * mcols]);
    let mut b = Tensor::zeros(&[rows]);
    let mats = [&basis.w, &basis.wdot, &basis.wddot];
    let init_vals = [
        (bc.start_pos.0, bc.start_pos.1),
        (bc.start_vel.0, bc.start_vel.1),
        (bc.start_acc.0, bc.start_acc.1),
    ];
    for (order, vals) in init_vals.iter().enumerate() {
        let r_x = 2 * order;
        let r_y = 2 * order + 1;
        for i in 0..mcols {
            a.set(r_x, i, mats[order].at(0, i));
            a.set(r_y, mcols + i, mats[order].at(0, i));
        }
        b.data_mut()[r_x] = vals.0;
        b.data_mut()[r_y] = vals.1;
    }
    for (t, pin) in bc.terminal.iter().enumerate() {
        let r = 6 + t;
        debug_assert!(pin.order == 1 || pin.order == 2);
        let mat = mats[pin.order];
        let off = match pin.axis {
            Axis::X => 0,
            Axis::Y => mcols,
        };
        for i in 0..mcols {
            a.set(r, off + i, mat.at(basis.n, i));
        }
        b.data_mut()[r] = pin.value;
    }
    (a, b)
}

/// Assemble the setpoint QP from the per-step costs and boundary rows.
pub fn assemble_setpoint_qp(
    basis: &BasisMatrices,
    sp: &Setpoints,
    bc: &BoundaryConditions,
    gains: &QpGains,
) -> QpProblem {
    let mcols = basis.coeffs();
    let smooth = basis.wddot.transpose().matmul(&basis.wddot);
    let mut q_xx = smooth.clone();
    let mut q_yy = smooth;
    let (r_v, r_l) = tracking_rows(basis, gains);
    if let Some(r_v) = &r_v {
        q_xx = q_xx.add(&r_v.transpose().matmul(r_v));
    }
    if let Some(r_l) = &r_l {
        q_yy = q_yy.add(&r_l.transpose().matmul(r_l));
    }
    let q_mat = Tensor::block_diag(&[&q_xx, &q_yy]);
    let jac = setpoint_jacobian(basis, gains);
    let p = Tensor::from_vec(&[2], vec![sp.v_d, sp.y_d]);
    let q_vec = jac.matmul(&p).reshaped(&[2 * mcols]);
    let (a_mat, b_vec) = equality_rows(basis, bc);
    QpProblem { q_mat, q_vec, a_mat, b_vec }
}

/// Polynomial trajectory: stacked coefficients plus sampled kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// (c_x, c_y) ∈ R^{2(m+1)}.
    pub xi: Tensor,
    /// (n+1)×2 positions, exactly `[W c_x, W c_y]`.
    pub waypoints: Tensor,
    /// (n+1)×2 velocities.
    pub vel: Tensor,
    /// (n+1)×2 accelerations.
    pub acc: Tensor,
}

impl Trajectory {
    pub fn from_xi(basis: &BasisMatrices, xi: Tensor) -> Self {
        let mcols = basis.coeffs();
        debug_assert_eq!(xi.len(), 2 * mcols);
        let cx = xi.slice_rows(0, mcols);
        let cy = xi.slice_rows(mcols, mcols);
        let wp = |mat: &Tensor| {
            let x = mat.matmul(&cx).reshaped(&[basis.n + 1, 1]);
            let y = mat.matmul(&cy).reshaped(&[basis.n + 1, 1]);
            Tensor::hstack(&[&x, &y])
        };
        Self {
            waypoints: wp(&basis.w),
            vel: wp(&basis.wdot),
            acc: wp(&basis.wddot),
            xi,
        }
    }

    pub fn point(&self, k: usize) -> (f64, f64) {
        (self.waypoints.at(k, 0), self.waypoints.at(k, 1))
    }

    pub fn velocity(&self, k: usize) -> (f64, f64) {
        (self.vel.at(k, 0), self.vel.at(k, 1))
    }

    pub fn acceleration(&self, k: usize) -> (f64, f64) {
        (self.acc.at(k, 0), self.acc.at(k, 1))
    }

    pub fn speed(&self, k: usize) -> f64 {
        let (vx, vy) = self.velocity(k);
        math::hypot(vx, vy)
    }

    pub fn steps(&self) -> usize {
        self.waypoints.rows() - 1
    }

    /// Flat waypoint vector (x-block then y-block), the τ layout used by the
    /// reconstruction loss and the dataset records.
    pub fn flat_waypoints(&self) -> Tensor {
        let n1 = self.waypoints.rows();
        let mut data = Vec::with_capacity(2 * n1);
        for k in 0..n1 {
            data.push(self.waypoints.at(k, 0));
        }
        for k in 0..n1 {
            data.push(self.waypoints.at(k, 1));
        }
        Tensor::from_vec(&[2 * n1], data)
    }
}

/// QP solution with optimality diagnostics.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub trajectory: Trajectory,
    pub multipliers: Tensor,
    /// ‖Qξ + q + Aᵀμ‖∞.
    pub stationarity: f64,
    /// ‖Aξ − b‖∞.
    pub equality: f64,
}

/// Solve an equality-constrained QP through one KKT linear solve.
pub fn solve_setpoint_qp(qp: &QpProblem, basis: &BasisMatrices) -> Result<QpSolution> {
    let dim = qp.q_mat.rows();
    let rows = qp.a_mat.rows();
    let kkt = build_kkt(&qp.q_mat, &qp.a_mat);
    let mut rhs = vec![0.0; dim + rows];
    for i in 0..dim {
        rhs[i] = -qp.q_vec.data()[i];
    }
    for r in 0..rows {
        rhs[dim + r] = qp.b_vec.data()[r];
    }
    let f = linalg::lu_factor(&kkt)?;
    let sol = f.solve_refined_vec(&kkt, &rhs);
    finish_solution(qp, basis, sol)
}

pub(crate) fn build_kkt(q_mat: &Tensor, a_mat: &Tensor) -> Tensor {
    let rows = a_mat.rows();
    if rows == 0 {
        return q_mat.clone();
    }
    let top = Tensor::hstack(&[q_mat, &a_mat.transpose()]);
    let bottom = Tensor::hstack(&[a_mat, &Tensor::zeros(&[rows, rows])]);
    Tensor::vstack(&[&top, &bottom])
}

fn finish_solution(qp: &QpProblem, basis: &BasisMatrices, sol: Vec<f64>) -> Result<QpSolution> {
    let dim = qp.q_mat.rows();
    let rows = qp.a_mat.rows();
    let xi = Tensor::from_vec(&[dim], sol[..dim].to_vec());
    let mu = Tensor::from_vec(&[rows], sol[dim..].to_vec());
    let mut stat = qp.q_mat.matmul(&xi).add(&qp.q_vec);
    if rows > 0 {
        stat = stat.add(&qp.a_mat.transpose().matmul(&mu));
    }
    let equality = if rows > 0 {
        qp.a_mat.matmul(&xi).sub(&qp.b_vec).norm_inf()
    } else {
        0.0
    };
    Ok(QpSolution {
        trajectory: Trajectory::from_xi(basis, xi),
        multipliers: mu,
        stationarity: stat.norm_inf(),
        equality,
    })
}

/// Pre-factored setpoint solver: Q and A do not depend on p or on the
/// boundary values, so one factorization serves every (p, bc) query.
pub struct SetpointSolver {
    basis: BasisMatrices,
    gains: QpGains,
    q_mat: Tensor,
    a_template: Tensor,
    kkt: Tensor,
    factors: LuFactors,
    jac_p: Tensor,
    terminal_structure: Vec<(Axis, usize)>,
}

impl SetpointSolver {
    pub fn new(basis: &BasisMatrices, gains: QpGains, terminal: &[TerminalPin]) -> Result<Self> {
        let mut bc = BoundaryConditions::at_rest((0.0, 0.0));
        bc.terminal = terminal.to_vec();
        let qp = assemble_setpoint_qp(basis, &Setpoints { v_d: 0.0, y_d: 0.0 }, &bc, &gains);
        let kkt = build_kkt(&qp.q_mat, &qp.a_mat);
        let factors = linalg::lu_factor(&kkt)?;
        Ok(Self {
            basis: basis.clone(),
            gains,
            q_mat: qp.q_mat,
            a_template: qp.a_mat,
            kkt,
            factors,
            jac_p: setpoint_jacobian(basis, &gains),
            terminal_structure: terminal.iter().map(|t| (t.axis, t.order)).collect(),
        })
    }

    pub fn basis(&self) -> &BasisMatrices {
        &self.basis
    }

    pub fn gains(&self) -> QpGains {
        self.gains
    }

    pub fn coeff_dim(&self) -> usize {
        2 * self.basis.coeffs()
    }

    pub fn equality_row_count(&self) -> usize {
        self.a_template.rows()
    }

    pub fn a_matrix(&self) -> &Tensor {
        &self.a_template
    }

    pub fn jac_p(&self) -> &Tensor {
        &self.jac_p
    }

    fn check_bc(&self, bc: &BoundaryConditions) {
        debug_assert_eq!(bc.terminal.len(), self.terminal_structure.len());
        debug_assert!(bc
            .terminal
            .iter()
            .zip(&self.terminal_structure)
            .all(|(p, s)| (p.axis, p.order) == *s));
    }

    pub fn b_vector(&self, bc: &BoundaryConditions) -> Tensor {
        self.check_bc(bc);
        let (_, b) = equality_rows(&self.basis, bc);
        b
    }

    /// Fast path: one refined back-substitution per query.
    pub fn solve(&self, sp: &Setpoints, bc: &BoundaryConditions) -> Result<QpSolution> {
        self.check_bc(bc);
        let dim = self.q_mat.rows();
        let p = Tensor::from_vec(&[2], vec![sp.v_d, sp.y_d]);
        let q_vec = self.jac_p.matmul(&p).reshaped(&[dim]);
        let b_vec = self.b_vector(bc);
        let mut rhs = vec![0.0; dim + b_vec.len()];
        for i in 0..dim {
            rhs[i] = -q_vec.data()[i];
        }
        for r in 0..b_vec.len() {
            rhs[dim + r] = b_vec.data()[r];
        }
        let sol = self.factors.solve_refined_vec(&self.kkt, &rhs);
        finish_solution(
            &QpProblem {
                q_mat: self.q_mat.clone(),
                q_vec,
                a_mat: self.a_template.clone(),
                b_vec,
            },
            &self.basis,
            sol,
        )
    }

    /// Differentiable batch solve: `p` is a B×2 variable, `b_mat` stacks one
    /// boundary column per sample. Returns ξ* as a 2(m+1)×B variable.
    pub fn solve_on_tape(&self, tape: &mut Tape, p: Var, b_mat: &Tensor) -> Result<Var> {
        let dim = self.q_mat.rows();
        let batch = tape.value(p).rows();
        if tape.value(p).cols() != 2 || b_mat.cols() != batch {
            return Err(CoreError::Contract(format!(
                "solve_on_tape: p {:?} and b {:?} disagree",
                tape.value(p).shape(),
                b_mat.shape()
            )));
        }
        let jac = tape.leaf(self.jac_p.clone());
        let pt = tape.transpose(p);
        let q_cols = tape.matmul(jac, pt);
        let neg_q = tape.scale(q_cols, -1.0);
        let b_leaf = tape.leaf(b_mat.clone());
        let rhs = tape.concat_rows(neg_q, b_leaf);
        let kkt = tape.leaf(self.kkt.clone());
        let sol = tape.solve(kkt, rhs)?;
        Ok(tape.slice_rows(sol, 0, dim))
    }
}
