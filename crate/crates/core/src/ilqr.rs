//! Finite-horizon iterative LQR with fused quadratic costs.
//!
//! Stage cost `(x - c_k)' Q_k (x - c_k) + r_k + u' R u` where `c_k` is the
//! center of a [`CombinedQuadratic`]. The backward pass is the affine
//! (time-varying center) Riccati recursion. All value-function quantities
//! are kept at half scale so that `P_k` and `K_k` read exactly as the
//! printed law `K_k = (R + B' P_{k+1} B)^{-1} B' P_{k+1} A`, with
//! `P_N = Q_F`.

use crate::dynamics::{
    self, angle_diff, ControlInput, ControlVector, DynamicsError, Linearization, StateVector, VehicleParams, VehicleState, IPSI,
};
use crate::quadform::CombinedQuadratic;
use nalgebra::{Cholesky, Matrix2, Matrix2x4, Matrix4, Matrix4x2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IlqrError {
    #[error("horizon must contain at least one stage")]
    EmptyHorizon,
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("control weight R is not symmetric positive definite")]
    BadControlWeight,
    #[error("R + B'PB is indefinite at step {step} even with regularization {mu:e}")]
    IndefiniteHessian { step: usize, mu: f64 },
    #[error("non-finite cost during rollout")]
    NonFiniteCost,
    #[error("invalid solver options: {0}")]
    BadOptions(&'static str),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Discrete-time system the solver optimizes over.
pub trait Model {
    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector, IlqrError>;
    fn linearize(&self, x: &StateVector, u: &ControlVector) -> Result<Linearization, IlqrError>;
    /// Projects a control onto the admissible set.
    fn clamp(&self, u: &ControlVector) -> ControlVector {
        *u
    }
    /// `a - b` in the state's tangent space.
    fn difference(&self, a: &StateVector, b: &StateVector) -> StateVector {
        a - b
    }
}

/// The kinematic bicycle stepped at a fixed `dt`.
#[derive(Debug, Clone, Copy)]
pub struct BicycleModel {
    pub params: VehicleParams,
    pub dt: f64,
}

impl Model for BicycleModel {
    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector, IlqrError> {
        let s = VehicleState { x: x[0], y: x[1], psi: x[2], v: x[3] };
        let next = dynamics::step(&s, &ControlInput::from_vector(u), self.dt, &self.params)?;
        Ok(next.to_vector())
    }

    fn linearize(&self, x: &StateVector, u: &ControlVector) -> Result<Linearization, IlqrError> {
        let s = VehicleState { x: x[0], y: x[1], psi: x[2], v: x[3] };
        Ok(dynamics::linearize(&s, &ControlInput::from_vector(u), self.dt, &self.params)?)
    }

    fn clamp(&self, u: &ControlVector) -> ControlVector {
        ControlInput::from_vector(u).clamped(&self.params).to_vector()
    }

    fn difference(&self, a: &StateVector, b: &StateVector) -> StateVector {
        let mut d = a - b;
        d[IPSI] = angle_diff(a[IPSI], b[IPSI]);
        d
    }
}

/// Fixed `x' = A x + B u`; used for exactness checks against closed-form LQ.
#[derive(Debug, Clone, Copy)]
pub struct LinearModel {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
}

impl Model for LinearModel {
    fn step(&self, x: &StateVector, u: &ControlVector) -> Result<StateVector, IlqrError> {
        Ok(self.a * x + self.b * u)
    }

    fn linearize(&self, _x: &StateVector, _u: &ControlVector) -> Result<Linearization, IlqrError> {
        Ok(Linearization { a: self.a, b: self.b })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub state_cost: CombinedQuadratic<4>,
    pub r: Matrix2<f64>,
}

impl StageCost {
    pub fn new(state_cost: CombinedQuadratic<4>, r: Matrix2<f64>) -> Result<Self, IlqrError> {
        if (r - r.transpose()).amax() > 1e-12 * r.amax().max(1.0) || Cholesky::new(r).is_none() {
            return Err(IlqrError::BadControlWeight);
        }
        Ok(Self { state_cost, r })
    }

    pub fn evaluate<M: Model>(&self, model: &M, x: &StateVector, u: &ControlVector) -> f64 {
        let dev = model.difference(x, &self.state_cost.center());
        self.state_cost.evaluate_deviation(&dev) + u.dot(&(self.r * u))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub state_cost: CombinedQuadratic<4>,
}

impl TerminalCost {
    pub fn evaluate<M: Model>(&self, model: &M, x: &StateVector) -> f64 {
        let dev = model.difference(x, &self.state_cost.center());
        self.state_cost.evaluate_deviation(&dev)
    }
}

/// Output of one Riccati sweep around a nominal trajectory.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// `K_k`; the local policy is `du = feedforward_k - K_k dx`.
    pub gains: Vec<Matrix2x4<f64>>,
    pub feedforward: Vec<ControlVector>,
    /// `P_k`, k = 0..=N, with `P_N = Q_F`.
    pub value_hessians: Vec<Matrix4<f64>>,
    /// Exact gradient of the total cost with respect to each `u_k` (full scale).
    pub cost_gradient: Vec<ControlVector>,
    /// Linear and quadratic coefficients of the predicted cost change in the
    /// line-search step `alpha`: `dJ(alpha) = alpha d1 + alpha^2 d2`.
    pub expected_change: (f64, f64),
}

/// Affine Riccati recursion around the nominal `(xs, us)`.
///
/// `mu` is added to `R + B'PB` before factorization; when factorization still
/// fails it is raised (doubling from `1e-6`) up to a fixed ceiling.
pub fn backward_pass<M: Model>(
    model: &M,
    lins: &[Linearization],
    stages: &[StageCost],
    terminal: &TerminalCost,
    xs: &[StateVector],
    us: &[ControlVector],
    mu: f64,
) -> Result<BackwardPass, IlqrError> {
    let n = stages.len();
    if n == 0 {
        return Err(IlqrError::EmptyHorizon);
    }
    check_len("linearizations", lins.len(), n)?;
    check_len("controls", us.len(), n)?;
    check_len("states", xs.len(), n + 1)?;

    let mut gains = vec![Matrix2x4::zeros(); n];
    let mut feedforward = vec![ControlVector::zeros(); n];
    let mut value_hessians = vec![Matrix4::zeros(); n + 1];
    let mut cost_gradient = vec![ControlVector::zeros(); n];

    let qf = terminal.state_cost.q;
    let dev_n = model.difference(&xs[n], &terminal.state_cost.center());
    let mut p = qf;
    let mut s = qf * dev_n;
    let mut adjoint = s;
    value_hessians[n] = p;
    let (mut d1, mut d2) = (0.0, 0.0);

    for k in (0..n).rev() {
        let Linearization { a, b } = lins[k];
        let stage = &stages[k];
        let q = stage.state_cost.q;
        let dev = model.difference(&xs[k], &stage.state_cost.center());
        let lx = q * dev;
        let lu = stage.r * us[k];

        let bt_p = b.transpose() * p;
        let qx = lx + a.transpose() * s;
        let qu = lu + b.transpose() * s;
        let qxx = q + a.transpose() * p * a;
        let quu = stage.r + bt_p * b;
        let qux = bt_p * a;

        let chol = factor_regularized(&quu, mu, k)?;
        let quu_reg = chol.1;
        let k_fb = chol.0.solve(&qux);
        let ff = -chol.0.solve(&qu);

        // du = ff - K dx, so the standard (negative) gain is -K
        let k_std = -k_fb;
        s = qx + k_std.transpose() * quu_reg * ff + k_std.transpose() * qu + qux.transpose() * ff;
        let p_new = qxx + k_std.transpose() * quu_reg * k_std + k_std.transpose() * qux + qux.transpose() * k_std;
        p = (p_new + p_new.transpose()) * 0.5;

        cost_gradient[k] = (lu + b.transpose() * adjoint) * 2.0;
        adjoint = lx + a.transpose() * adjoint;

        d1 += 2.0 * ff.dot(&qu);
        d2 += ff.dot(&(quu_reg * ff));
        gains[k] = k_fb;
        feedforward[k] = ff;
        value_hessians[k] = p;
    }

    Ok(BackwardPass { gains, feedforward, value_hessians, cost_gradient, expected_change: (d1, d2) })
}

const MU_START: f64 = 1e-6;
const MU_MAX: f64 = 1e8;

fn factor_regularized(quu: &Matrix2<f64>, mu: f64, step: usize) -> Result<(Cholesky<f64, nalgebra::U2>, Matrix2<f64>), IlqrError> {
    let mut reg = mu;
    loop {
        let m = quu + Matrix2::identity() * reg;
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, m));
        }
        reg = if reg < MU_START { MU_START } else { reg * 2.0 };
        if reg > MU_MAX {
            return Err(IlqrError::IndefiniteHessian { step, mu: reg });
        }
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), IlqrError> {
    if got != expected {
        return Err(IlqrError::LengthMismatch { what, got, expected });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once the relative cost decrease of an accepted step falls below this.
    pub tol: f64,
    pub max_backtracks: usize,
    pub backtrack_factor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 50, tol: 1e-4, max_backtracks: 10, backtrack_factor: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub xs: Vec<StateVector>,
    pub us: Vec<ControlVector>,
    /// Feedback gains `K_k` from the last backward pass.
    pub gains: Vec<Matrix2x4<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost of the initial rollout followed by every accepted iterate.
    pub cost_history: Vec<f64>,
}

impl SolveResult {
    pub fn first_control(&self) -> ControlInput {
        ControlInput::from_vector(&self.us[0])
    }

    pub fn states(&self) -> Vec<VehicleState> {
        self.xs.iter().map(VehicleState::from_vector).collect()
    }
}

/// Total cost of a state/control trajectory.
pub fn trajectory_cost<M: Model>(
    model: &M,
    stages: &[StageCost],
    terminal: &TerminalCost,
    xs: &[StateVector],
    us: &[ControlVector],
) -> f64 {
    let running: f64 = stages.iter().zip(xs).zip(us).map(|((g, x), u)| g.evaluate(model, x, u)).sum();
    running + terminal.evaluate(model, &xs[stages.len()])
}

/// Clamps and simulates `us` from `x0`, returning the states actually visited.
pub fn rollout<M: Model>(model: &M, x0: &StateVector, us: &mut [ControlVector]) -> Result<Vec<StateVector>, IlqrError> {
    let mut xs = Vec::with_capacity(us.len() + 1);
    xs.push(*x0);
    for u in us.iter_mut() {
        *u = model.clamp(u);
        let next = model.step(xs.last().unwrap(), u)?;
        xs.push(next);
    }
    Ok(xs)
}

/// Runs iLQR from `x0` starting at the control guess `u_init`.
pub fn solve<M: Model>(
    model: &M,
    x0: &StateVector,
    u_init: &[ControlVector],
    stages: &[StageCost],
    terminal: &TerminalCost,
    opts: &SolverOptions,
) -> Result<SolveResult, IlqrError> {
    let n = stages.len();
    if n == 0 {
        return Err(IlqrError::EmptyHorizon);
    }
    check_len("initial controls", u_init.len(), n)?;
    if opts.max_iter == 0 {
        return Err(IlqrError::BadOptions("max_iter must be at least 1"));
    }
    if !(opts.tol > 0.0) {
        return Err(IlqrError::BadOptions("tol must be positive"));
    }

    let mut us = u_init.to_vec();
    let mut xs = rollout(model, x0, &mut us)?;
    let mut cost = trajectory_cost(model, stages, terminal, &xs, &us);
    if !cost.is_finite() {
        return Err(IlqrError::NonFiniteCost);
    }
    let mut history = vec![cost];
    let mut gains = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut lins = Vec::with_capacity(n);

    while iterations < opts.max_iter {
        iterations += 1;
        lins.clear();
        for k in 0..n {
            lins.push(model.linearize(&xs[k], &us[k])?);
        }
        let bp = backward_pass(model, &lins, stages, terminal, &xs, &us, 0.0)?;

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let (cand_x, cand_u) = forward_pass(model, &xs, &us, &bp, alpha)?;
            let c = trajectory_cost(model, stages, terminal, &cand_x, &cand_u);
            if c.is_finite() && c < cost {
                accepted = Some((cand_x, cand_u, c));
                break;
            }
            alpha *= opts.backtrack_factor;
        }
        gains = bp.gains;

        let Some((nx, nu, nc)) = accepted else {
            // no descent direction left along the line search
            converged = true;
            break;
        };
        let rel = (cost - nc) / cost.abs().max(f64::MIN_POSITIVE);
        xs = nx;
        us = nu;
        cost = nc;
        history.push(cost);
        if rel < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(SolveResult { xs, us, gains, cost, iterations, converged, cost_history: history })
}

fn forward_pass<M: Model>(
    model: &M,
    xs: &[StateVector],
    us: &[ControlVector],
    bp: &BackwardPass,
    alpha: f64,
) -> Result<(Vec<StateVector>, Vec<ControlVector>), IlqrError> {
    let n = us.len();
    let mut nx = Vec::with_capacity(n + 1);
    let mut nu = Vec::with_capacity(n);
    nx.push(xs[0]);
    for k in 0..n {
        let dx = model.difference(&nx[k], &xs[k]);
        let u = model.clamp(&(us[k] + bp.feedforward[k] * alpha - bp.gains[k] * dx));
        let next = model.step(&nx[k], &u)?;
        nu.push(u);
        nx.push(next);
    }
    Ok((nx, nu))
}
