//! Kinematic bicycle model and the Jacobians of its discrete step.
//!
//! State is `[x, y, psi, v]`, control is `[a, delta]`. The continuous model
//!
//! ```text
//! x'   = v cos(psi)
//! y'   = v sin(psi)
//! psi' = v tan(delta) / wheelbase
//! v'   = a
//! ```
//!
//! is integrated with one classical Runge-Kutta step per call. The
//! linearization differentiates that discrete map (including the speed
//! clamp), so the iLQR sees exactly what the simulator executes.

use nalgebra::{Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use thiserror::Error;

pub type StateVector = Vector4<f64>;
pub type ControlVector = Vector2<f64>;

/// Index of each state component inside a [`StateVector`].
pub const IX: usize = 0;
pub const IY: usize = 1;
pub const IPSI: usize = 2;
pub const IV: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {0} passed to the vehicle model")]
    NonFinite(&'static str),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("steering angle {0} rad is at or beyond the tan() singularity")]
    SteeringSingular(f64),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid can land exactly on -pi after the shift for inputs like 3*pi
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Signed shortest rotation from `from` to `to`.
pub fn angle_diff(to: f64, from: f64) -> f64 {
    wrap_angle(to - from)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, psi: f64, v: f64) -> Self {
        Self { x, y, psi: wrap_angle(psi), v }
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::new(self.x, self.y, self.psi, self.v)
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self::new(v[IX], v[IY], v[IPSI], v[IV])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite() && self.v.is_finite()
    }

    pub fn distance_to(&self, other: &VehicleState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub delta: f64,
}

impl ControlInput {
    pub fn new(a: f64, delta: f64) -> Self {
        Self { a, delta }
    }

    pub fn to_vector(&self) -> ControlVector {
        ControlVector::new(self.a, self.delta)
    }

    pub fn from_vector(u: &ControlVector) -> Self {
        Self { a: u[0], delta: u[1] }
    }

    /// Saturates both channels to the actuator limits in `p`.
    pub fn clamped(&self, p: &VehicleParams) -> Self {
        Self { a: self.a.clamp(-p.a_max, p.a_max), delta: self.delta.clamp(-p.delta_max, p.delta_max) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Axle-to-axle distance (m).
    pub wheelbase: f64,
    pub delta_max: f64,
    pub a_max: f64,
    pub v_max: f64,
    pub v_min: f64,
}

impl Default for VehicleParams {
    /// RC-truck scale platform.
    fn default() -> Self {
        Self { wheelbase: 0.33, delta_max: 0.45, a_max: 3.0, v_max: 10.0, v_min: 0.0 }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let all = [self.wheelbase, self.delta_max, self.a_max, self.v_max, self.v_min];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(DynamicsError::InvalidParams("all parameters must be finite".into()));
        }
        if self.wheelbase <= 0.0 {
            return Err(DynamicsError::InvalidParams(format!("wheelbase must be positive, got {}", self.wheelbase)));
        }
        if !(self.delta_max > 0.0 && self.delta_max < FRAC_PI_2) {
            return Err(DynamicsError::InvalidParams(format!("delta_max must lie in (0, pi/2), got {}", self.delta_max)));
        }
        if self.a_max <= 0.0 {
            return Err(DynamicsError::InvalidParams(format!("a_max must be positive, got {}", self.a_max)));
        }
        if self.v_min > self.v_max {
            return Err(DynamicsError::InvalidParams(format!("v_min {} exceeds v_max {}", self.v_min, self.v_max)));
        }
        Ok(())
    }

    /// Tightest turn curvature reachable at full steering lock.
    pub fn max_curvature(&self) -> f64 {
        self.delta_max.tan() / self.wheelbase
    }
}

/// Jacobians of one discrete step with respect to state (`a`) and control (`b`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
}

fn check_inputs(s: &VehicleState, u: &ControlInput, dt: f64) -> Result<(), DynamicsError> {
    if !s.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    if !(u.a.is_finite() && u.delta.is_finite()) {
        return Err(DynamicsError::NonFinite("control"));
    }
    if !dt.is_finite() {
        return Err(DynamicsError::NonFinite("time step"));
    }
    if dt <= 0.0 {
        return Err(DynamicsError::NonPositiveStep(dt));
    }
    if u.delta.abs() >= FRAC_PI_2 {
        return Err(DynamicsError::SteeringSingular(u.delta));
    }
    Ok(())
}

#[inline]
fn derivative(x: &StateVector, a: f64, tan_delta: f64, inv_wb: f64) -> StateVector {
    let (s, c) = x[IPSI].sin_cos();
    let v = x[IV];
    StateVector::new(v * c, v * s, v * tan_delta * inv_wb, a)
}

#[inline]
fn state_jacobian(x: &StateVector, tan_delta: f64, inv_wb: f64) -> Matrix4<f64> {
    let (s, c) = x[IPSI].sin_cos();
    let v = x[IV];
    #[rustfmt::skip]
    let j = Matrix4::new(
        0.0, 0.0, -v * s, c,
        0.0, 0.0,  v * c, s,
        0.0, 0.0,  0.0,   tan_delta * inv_wb,
        0.0, 0.0,  0.0,   0.0,
    );
    j
}

#[inline]
fn control_jacobian(x: &StateVector, sec2_delta: f64, inv_wb: f64, da: f64) -> Matrix4x2<f64> {
    let v = x[IV];
    #[rustfmt::skip]
    let j = Matrix4x2::new(
        0.0, 0.0,
        0.0, 0.0,
        0.0, v * sec2_delta * inv_wb,
        da,  0.0,
    );
    j
}

/// Acceleration actually applied over the step: limited so the speed ends
/// inside `[v_min, v_max]` instead of overshooting mid-step (a braking car
/// at rest must not roll backwards). Returns whether a limit was hit.
fn effective_accel(v: f64, a: f64, dt: f64, p: &VehicleParams) -> (f64, bool) {
    let lo = (p.v_min - v) / dt;
    let hi = (p.v_max - v) / dt;
    if a < lo {
        (lo, true)
    } else if a > hi {
        (hi.max(lo), true)
    } else {
        (a, false)
    }
}

/// One RK4 step without clamping or wrapping, returned as a raw vector.
fn rk4_raw(x: &StateVector, u: &ControlInput, dt: f64, p: &VehicleParams) -> StateVector {
    let tan_d = u.delta.tan();
    let inv_wb = 1.0 / p.wheelbase;
    let (acc, _) = effective_accel(x[IV], u.a, dt, p);
    let k1 = derivative(x, acc, tan_d, inv_wb);
    let k2 = derivative(&(x + k1 * (0.5 * dt)), acc, tan_d, inv_wb);
    let k3 = derivative(&(x + k2 * (0.5 * dt)), acc, tan_d, inv_wb);
    let k4 = derivative(&(x + k3 * dt), acc, tan_d, inv_wb);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Advances the vehicle by `dt` seconds.
///
/// The control is expected to be pre-clamped. Acceleration is limited so
/// the speed lands inside `[v_min, v_max]`; the heading is re-wrapped.
pub fn step(s: &VehicleState, u: &ControlInput, dt: f64, p: &VehicleParams) -> Result<VehicleState, DynamicsError> {
    check_inputs(s, u, dt)?;
    let next = rk4_raw(&s.to_vector(), u, dt, p);
    let out = VehicleState { x: next[IX], y: next[IY], psi: wrap_angle(next[IPSI]), v: next[IV].clamp(p.v_min, p.v_max) };
    if !out.is_finite() {
        return Err(DynamicsError::NonFinite("integrated state"));
    }
    Ok(out)
}

/// Analytic Jacobians of [`step`] at `(s, u)`.
///
/// Sensitivities are pushed through each RK4 stage by the chain rule. When
/// a speed limit is active the applied acceleration depends on the initial
/// speed instead of the command, so the speed row of the result is zero.
pub fn linearize(s: &VehicleState, u: &ControlInput, dt: f64, p: &VehicleParams) -> Result<Linearization, DynamicsError> {
    check_inputs(s, u, dt)?;
    let (sin_d, cos_d) = u.delta.sin_cos();
    let tan_d = sin_d / cos_d;
    let sec2 = 1.0 / (cos_d * cos_d);
    let inv_wb = 1.0 / p.wheelbase;
    let h = 0.5 * dt;

    let x1 = s.to_vector();
    let (acc, limited) = effective_accel(x1[IV], u.a, dt, p);
    // d(acc)/d(command) and d(acc)/d(initial state), entering every stage's speed rate
    let da = if limited { 0.0 } else { 1.0 };
    let mut dacc_dx = Matrix4::zeros();
    if limited {
        dacc_dx[(IV, IV)] = -1.0 / dt;
    }

    let k1 = derivative(&x1, acc, tan_d, inv_wb);
    let dk1_dx = state_jacobian(&x1, tan_d, inv_wb) + dacc_dx;
    let dk1_du = control_jacobian(&x1, sec2, inv_wb, da);

    let x2 = x1 + k1 * h;
    let k2 = derivative(&x2, acc, tan_d, inv_wb);
    let f2 = state_jacobian(&x2, tan_d, inv_wb);
    let dk2_dx = f2 * (Matrix4::identity() + dk1_dx * h) + dacc_dx;
    let dk2_du = f2 * (dk1_du * h) + control_jacobian(&x2, sec2, inv_wb, da);

    let x3 = x1 + k2 * h;
    let f3 = state_jacobian(&x3, tan_d, inv_wb);
    let dk3_dx = f3 * (Matrix4::identity() + dk2_dx * h) + dacc_dx;
    let dk3_du = f3 * (dk2_du * h) + control_jacobian(&x3, sec2, inv_wb, da);

    let k3 = derivative(&x3, acc, tan_d, inv_wb);
    let x4 = x1 + k3 * dt;
    let f4 = state_jacobian(&x4, tan_d, inv_wb);
    let dk4_dx = f4 * (Matrix4::identity() + dk3_dx * dt) + dacc_dx;
    let dk4_du = f4 * (dk3_du * dt) + control_jacobian(&x4, sec2, inv_wb, da);

    let w = dt / 6.0;
    let a = Matrix4::identity() + (dk1_dx + dk2_dx * 2.0 + dk3_dx * 2.0 + dk4_dx) * w;
    let b = (dk1_du + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * w;
    Ok(Linearization { a, b })
}
