//! Convoy MPC: trajectory tracking fused with lead/follow spacing costs.
//!
//! Each tick the agent predicts its neighbors forward at constant speed and
//! heading, places spacing references a desired gap behind the predicted
//! lead and ahead of the predicted follower (measured along the path),
//! scales those terms by how far the current distance is off the desired
//! gap, fuses everything per step into one quadratic and solves with iLQR.

use crate::agent::{AgentOutput, Controller, Environment, NeighborSnapshot, Observation};
use crate::dynamics::{self, ControlInput, ControlVector, VehicleParams, VehicleState, IPSI};
use crate::geometry::{path_clear, Path};
use crate::ilqr::{self, BicycleModel, IlqrError, SolveResult, SolverOptions, StageCost, TerminalCost};
use crate::planner::{self, PlannerConfig, PlannerError};
use crate::quadform::{combine, QuadformError, QuadraticTerm};
use nalgebra::{Matrix2, Matrix4, Rotation2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvoyError {
    #[error("invalid convoy configuration: {0}")]
    BadConfig(String),
    #[error("reference placement needs at least one neighbor")]
    NoNeighbors,
    #[error("reference trajectory has {got} points, expected {expected}")]
    ReferenceLength { got: usize, expected: usize },
    #[error("stage {step}: {source}")]
    Cost { step: usize, source: QuadformError },
    #[error(transparent)]
    Solver(#[from] IlqrError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

/// All convoy-controller tunables.
///
/// Weight matrices act on `[along, lateral, heading, speed]` deviations: the
/// position block is expressed in the frame of the reference it penalizes,
/// so a diagonal weight separates along-path from cross-track error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvoyConfig {
    #[serde(with = "crate::weights")]
    pub q: Matrix4<f64>,
    #[serde(with = "crate::weights")]
    pub q_f: Matrix4<f64>,
    #[serde(with = "crate::weights")]
    pub r: Matrix2<f64>,
    #[serde(with = "crate::weights")]
    pub q_lead: Matrix4<f64>,
    #[serde(with = "crate::weights")]
    pub q_follow: Matrix4<f64>,
    /// Speed gain of the gap law (s).
    pub lambda1: f64,
    /// Relative-speed gain of the gap law (s).
    pub lambda2: f64,
    /// Minimum gap (m).
    pub k_min: f64,
    pub w_far: f64,
    pub w_near: f64,
    /// Weight factor used once two agents are closer than 1 cm.
    pub w_cap: f64,
    pub horizon: usize,
    pub dt: f64,
    /// Convoy target speed (m/s).
    pub v_t: f64,
    /// Fallback speed gain on the lead-gap error (1/m).
    pub lambda3: f64,
    /// Fallback speed gain on the follower distance (1/m).
    pub lambda4: f64,
    pub d_lookahead: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Re-solve every this many calls; in between the last plan is replayed.
    pub replan_every: usize,
    pub planner: PlannerConfig,
}

impl Default for ConvoyConfig {
    fn default() -> Self {
        let diag = |a: f64, b: f64, c: f64, d: f64| Matrix4::from_diagonal(&Vector4::new(a, b, c, d));
        Self {
            q: diag(0.2, 4.0, 2.0, 1.0),
            q_f: diag(0.4, 8.0, 4.0, 2.0),
            r: Matrix2::from_diagonal(&nalgebra::Vector2::new(0.5, 2.0)),
            q_lead: diag(3.0, 0.5, 0.0, 1.0),
            q_follow: diag(3.0, 0.5, 0.0, 1.0),
            lambda1: 1.0,
            lambda2: 0.2,
            k_min: 2.0,
            w_far: 1.0,
            w_near: 2.0,
            w_cap: 100.0,
            horizon: 30,
            dt: 0.1,
            v_t: 4.0,
            lambda3: 0.1,
            lambda4: 0.02,
            d_lookahead: 5.0,
            max_iter: 50,
            tol: 1e-4,
            replan_every: 1,
            planner: PlannerConfig::default(),
        }
    }
}

fn check_psd(name: &str, m: &Matrix4<f64>) -> Result<(), ConvoyError> {
    QuadraticTerm::new(*m, Vector4::zeros()).map(|_| ()).map_err(|e| ConvoyError::BadConfig(format!("{name}: {e}")))
}

impl ConvoyConfig {
    pub fn validate(&self) -> Result<(), ConvoyError> {
        let bad = |m: &str| Err(ConvoyError::BadConfig(m.to_string()));
        check_psd("q", &self.q)?;
        check_psd("q_f", &self.q_f)?;
        check_psd("q_lead", &self.q_lead)?;
        check_psd("q_follow", &self.q_follow)?;
        if (self.r - self.r.transpose()).amax() > 1e-12 || self.r.cholesky().is_none() {
            return bad("r must be symmetric positive definite");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if !(self.k_min > 0.0) {
            return bad("k_min must be positive");
        }
        if !(self.w_far >= 0.0 && self.w_near >= 0.0 && self.w_cap >= 1.0) {
            return bad("weighting gains must be non-negative and w_cap >= 1");
        }
        if self.horizon < 2 {
            return bad("horizon must be at least 2");
        }
        if !(self.dt > 0.0 && self.v_t >= 0.0 && self.d_lookahead > 0.0 && self.tol > 0.0) {
            return bad("dt, d_lookahead and tol must be positive and v_t non-negative");
        }
        if !(self.lambda3 >= 0.0 && self.lambda4 >= 0.0) {
            return bad("lambda3 and lambda4 must be non-negative");
        }
        if self.max_iter == 0 || self.replan_every == 0 {
            return bad("max_iter and replan_every must be at least 1");
        }
        self.planner.validate().map_err(|e| ConvoyError::BadConfig(e.to_string()))
    }

    /// Steady-state gap `lambda1 v_t + K` (all agents at the same speed).
    pub fn steady_gap(&self) -> f64 {
        self.lambda1 * self.v_t + self.k_min
    }

    fn solver_options(&self) -> SolverOptions {
        SolverOptions { max_iter: self.max_iter, tol: self.tol, ..SolverOptions::default() }
    }
}

/// Desired along-path gap to the lead, floored at `k_min`.
pub fn desired_gap(cfg: &ConvoyConfig, v_own: f64, v_lead: f64) -> f64 {
    (cfg.lambda1 * cfg.v_t + cfg.lambda2 * (v_own - v_lead) + cfg.k_min).max(cfg.k_min)
}

/// Multiplier on a spacing weight given the current Euclidean distance.
pub fn weight_factor(dist: f64, d_ref: f64, w_far: f64, w_near: f64, w_cap: f64) -> f64 {
    if dist < 0.01 {
        return w_cap;
    }
    let w = if dist >= d_ref { 1.0 + w_far * (dist - d_ref) / dist } else { 1.0 + w_near * (d_ref - dist) / dist };
    w.min(w_cap)
}

/// Predicted neighbor states `0..=n`, holding speed and heading.
pub fn rollout_neighbor(snap: &NeighborSnapshot, n: usize, dt: f64, params: &VehicleParams) -> Vec<VehicleState> {
    let s0 = snap.state;
    let mut out = Vec::with_capacity(n + 1);
    out.push(s0);
    if (params.v_min..=params.v_max).contains(&s0.v) && s0.is_finite() {
        // zero input inside the speed limits is straight-line motion
        let (sin, cos) = s0.psi.sin_cos();
        let psi = dynamics::wrap_angle(s0.psi);
        for k in 1..=n {
            let d = s0.v * dt * k as f64;
            out.push(VehicleState::new(s0.x + d * cos, s0.y + d * sin, psi, s0.v));
        }
        return out;
    }
    let u = ControlInput::default();
    for _ in 0..n {
        let last = *out.last().unwrap();
        out.push(dynamics::step(&last, &u, dt, params).unwrap_or(last));
    }
    out
}

/// Ages a snapshot to `now` under the same constant-motion assumption.
pub fn advance_snapshot(snap: &NeighborSnapshot, now: f64, params: &VehicleParams) -> NeighborSnapshot {
    let age = now - snap.timestamp;
    if !(age > 1e-9) {
        return *snap;
    }
    let state = dynamics::step(&snap.state, &ControlInput::default(), age, params).unwrap_or(snap.state);
    NeighborSnapshot { state, timestamp: now, ..*snap }
}

/// Spacing references for each horizon step; `None` where a neighbor is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvoyReference {
    pub lead_refs: Option<Vec<VehicleState>>,
    pub follow_refs: Option<Vec<VehicleState>>,
    /// Projected arc length of each predicted neighbor state.
    pub lead_s: Option<Vec<f64>>,
    pub follow_s: Option<Vec<f64>>,
}

/// Projects a predicted trajectory onto `path`: the first state by a
/// windowed search around `s_guess`, the rest by local descent from the
/// previous projection so the track never jumps between nearby branches.
fn project_track(path: &Path, traj: &[VehicleState], s_guess: f64, first_window: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len());
    for (k, st) in traj.iter().enumerate() {
        let q = nalgebra::Point2::new(st.x, st.y);
        out.push(match k {
            0 => path.project_near(&q, s_guess, first_window),
            _ => path.project_descend(&q, out[k - 1]),
        });
    }
    out
}

/// Places spacing references `d_ref_lead` behind the predicted lead and
/// `d_ref_follow` ahead of the predicted follower, along `path`.
///
/// `own_s` seeds the projections; reference speeds are the neighbors'
/// current speeds.
pub fn place_references(
    path: &Path,
    lead_traj: Option<&[VehicleState]>,
    follow_traj: Option<&[VehicleState]>,
    d_ref_lead: f64,
    d_ref_follow: f64,
    own_s: f64,
) -> Result<ConvoyReference, ConvoyError> {
    if lead_traj.is_none() && follow_traj.is_none() {
        return Err(ConvoyError::NoNeighbors);
    }
    let place = |traj: &[VehicleState], guess: f64, offset: f64, gap: f64| {
        let s = project_track(path, traj, guess, gap.abs() + 20.0);
        let speed = traj[0].v;
        let refs = s
            .iter()
            .map(|&sk| {
                let p = path.pose_at(sk + offset);
                VehicleState::new(p.x, p.y, p.heading, speed)
            })
            .collect();
        (refs, s)
    };
    let (lead_refs, lead_s) = match lead_traj {
        Some(t) => {
            let (r, s) = place(t, own_s + d_ref_lead, -d_ref_lead, d_ref_lead);
            (Some(r), Some(s))
        }
        None => (None, None),
    };
    let (follow_refs, follow_s) = match follow_traj {
        Some(t) => {
            let (r, s) = place(t, own_s - d_ref_follow, d_ref_follow, d_ref_follow);
            (Some(r), Some(s))
        }
        None => (None, None),
    };
    Ok(ConvoyReference { lead_refs, follow_refs, lead_s, follow_s })
}

/// Path-following references `0..=n` starting at `s0` and advancing at
/// `speed`. On open paths the reference parks at the end with zero speed.
pub fn tracking_references(path: &Path, s0: f64, speed: f64, dt: f64, n: usize) -> Vec<VehicleState> {
    (0..=n)
        .map(|k| {
            let s = s0 + speed * dt * k as f64;
            let p = path.pose_at(s);
            let v = if !path.is_closed() && s >= path.length() { 0.0 } else { speed };
            VehicleState::new(p.x, p.y, p.heading, v)
        })
        .collect()
}

/// Rotates the position block of a reference-frame weight into world axes.
pub fn frame_weight(q: &Matrix4<f64>, heading: f64) -> Matrix4<f64> {
    let rot = *Rotation2::new(heading).matrix();
    let pos = rot * q.fixed_view::<2, 2>(0, 0) * rot.transpose();
    let cross = rot * q.fixed_view::<2, 2>(0, 2);
    let mut w = *q;
    // exact symmetry for the downstream checks
    w.fixed_view_mut::<2, 2>(0, 0).copy_from(&((pos + pos.transpose()) * 0.5));
    w.fixed_view_mut::<2, 2>(0, 2).copy_from(&cross);
    w.fixed_view_mut::<2, 2>(2, 0).copy_from(&cross.transpose());
    w
}

/// A rotated copy of a config weight scaled by a non-negative factor stays
/// PSD, so the per-term eigenvalue check is skipped on this hot path;
/// `combine` still rejects non-finite values.
fn term(weight: &Matrix4<f64>, scale: f64, reference: &VehicleState, heading_anchor: f64) -> QuadraticTerm<4> {
    let mut r = reference.to_vector();
    // keep every heading within half a turn of the step's tracking heading
    r[IPSI] = heading_anchor + dynamics::angle_diff(reference.psi, heading_anchor);
    QuadraticTerm { weight: frame_weight(weight, reference.psi) * scale, reference: r }
}

/// Fuses tracking and spacing terms into per-step stage costs (steps
/// `0..n`) and the terminal cost (step `n`).
pub fn assemble_stage_costs(
    traj_refs: &[VehicleState],
    reference: &ConvoyReference,
    cfg: &ConvoyConfig,
    w_lead: f64,
    w_follow: f64,
) -> Result<(Vec<StageCost>, TerminalCost), ConvoyError> {
    let n = traj_refs.len().saturating_sub(1);
    if n == 0 {
        return Err(ConvoyError::ReferenceLength { got: traj_refs.len(), expected: cfg.horizon + 1 });
    }
    for refs in [&reference.lead_refs, &reference.follow_refs].into_iter().flatten() {
        if refs.len() != n + 1 {
            return Err(ConvoyError::ReferenceLength { got: refs.len(), expected: n + 1 });
        }
    }
    let fuse = |k: usize, tracking: &Matrix4<f64>| {
        let anchor = traj_refs[k].psi;
        let first = term(tracking, 1.0, &traj_refs[k], anchor);
        let mut terms = [first; 3];
        let mut len = 1;
        if let Some(l) = &reference.lead_refs {
            terms[len] = term(&cfg.q_lead, w_lead, &l[k], anchor);
            len += 1;
        }
        if let Some(f) = &reference.follow_refs {
            terms[len] = term(&cfg.q_follow, w_follow, &f[k], anchor);
            len += 1;
        }
        combine(&terms[..len]).map_err(|source| ConvoyError::Cost { step: k, source })
    };
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        stages.push(StageCost::new(fuse(k, &cfg.q)?, cfg.r)?);
    }
    let terminal = TerminalCost { state_cost: fuse(n, &cfg.q_f)? };
    Ok((stages, terminal))
}

/// One convoy solve plus what went into it.
#[derive(Debug, Clone)]
pub struct ConvoyPlan {
    pub solve: SolveResult,
    pub own_s: f64,
    pub reference: Option<ConvoyReference>,
    pub d_ref_lead: Option<f64>,
    pub d_ref_follow: Option<f64>,
    pub w_lead: Option<f64>,
    pub w_follow: Option<f64>,
}

/// Convoy controller for one tick.
///
/// `warm` is the initial control sequence (zeros when absent); `s_hint` is
/// the agent's previous arc length, used to keep its projection continuous.
pub fn compute_control(
    obs: &Observation,
    path: &Path,
    cfg: &ConvoyConfig,
    params: &VehicleParams,
    warm: Option<&[ControlVector]>,
    s_hint: Option<f64>,
) -> Result<ConvoyPlan, ConvoyError> {
    let n = cfg.horizon;
    let own = obs.own;
    let q = nalgebra::Point2::new(own.x, own.y);
    let own_s = match s_hint {
        Some(h) => path.project_near(&q, h, 10.0 + 2.0 * own.v.abs() * cfg.dt * n as f64),
        None => path.project(&q),
    };
    let lead = obs.lead.map(|s| advance_snapshot(&s, obs.time, params));
    let follow = obs.follow.map(|s| advance_snapshot(&s, obs.time, params));

    let d_ref_lead = lead.map(|l| desired_gap(cfg, own.v, l.state.v));
    let d_ref_follow = follow.map(|f| desired_gap(cfg, f.state.v, own.v));
    let w_lead = lead.zip(d_ref_lead).map(|(l, d)| weight_factor(own.distance_to(&l.state), d, cfg.w_far, cfg.w_near, cfg.w_cap));
    let w_follow = follow.zip(d_ref_follow).map(|(f, d)| weight_factor(own.distance_to(&f.state), d, cfg.w_far, cfg.w_near, cfg.w_cap));

    let lead_traj = lead.map(|l| rollout_neighbor(&l, n, cfg.dt, params));
    let follow_traj = follow.map(|f| rollout_neighbor(&f, n, cfg.dt, params));
    let reference = if lead_traj.is_some() || follow_traj.is_some() {
        Some(place_references(
            path,
            lead_traj.as_deref(),
            follow_traj.as_deref(),
            d_ref_lead.unwrap_or(0.0),
            d_ref_follow.unwrap_or(0.0),
            own_s,
        )?)
    } else {
        None
    };
    let traj_refs = tracking_references(path, own_s, cfg.v_t, cfg.dt, n);
    let empty = ConvoyReference { lead_refs: None, follow_refs: None, lead_s: None, follow_s: None };
    let (stages, terminal) =
        assemble_stage_costs(&traj_refs, reference.as_ref().unwrap_or(&empty), cfg, w_lead.unwrap_or(0.0), w_follow.unwrap_or(0.0))?;

    let model = BicycleModel { params: *params, dt: cfg.dt };
    let zeros = vec![ControlVector::zeros(); n];
    let init = match warm {
        Some(w) if w.len() == n => w,
        _ => &zeros,
    };
    let solve = ilqr::solve(&model, &own.to_vector(), init, &stages, &terminal, &cfg.solver_options())?;
    Ok(ConvoyPlan { solve, own_s, reference, d_ref_lead, d_ref_follow, w_lead, w_follow })
}

/// Advances a control sequence by `steps` (possibly fractional) samples,
/// interpolating linearly and repeating the final control.
pub fn shift_controls(us: &[ControlVector], steps: f64) -> Vec<ControlVector> {
    let n = us.len();
    if n == 0 {
        return Vec::new();
    }
    (0..n)
        .map(|k| {
            let t = k as f64 + steps.max(0.0);
            let i = t.floor() as usize;
            if i + 1 >= n {
                us[n - 1]
            } else {
                let f = t - i as f64;
                us[i] * (1.0 - f) + us[i + 1] * f
            }
        })
        .collect()
}

/// Plan kept between ticks for warm starts and replanning intervals.
#[derive(Debug, Clone)]
struct StoredPlan {
    time: f64,
    us: Vec<ControlVector>,
    xs: Vec<VehicleState>,
    fallback: bool,
    w_lead: Option<f64>,
    w_follow: Option<f64>,
}

/// The convoy controller wrapped in the obstacle check: if the convoy plan
/// is blocked, hand over to the local planner and track its arc instead.
#[derive(Debug, Clone)]
pub struct ConvoyAgent {
    pub cfg: ConvoyConfig,
    pub params: VehicleParams,
    s_hint: Option<f64>,
    stored: Option<StoredPlan>,
    calls: usize,
}

impl ConvoyAgent {
    pub fn new(cfg: ConvoyConfig, params: VehicleParams) -> Result<Self, ConvoyError> {
        cfg.validate()?;
        params.validate().map_err(|e| ConvoyError::BadConfig(e.to_string()))?;
        Ok(Self { cfg, params, s_hint: None, stored: None, calls: 0 })
    }

    fn replay(&self, plan: &StoredPlan, now: f64) -> ControlVector {
        let k = ((now - plan.time) / self.cfg.dt + 1e-9).floor().max(0.0) as usize;
        plan.us[k.min(plan.us.len() - 1)]
    }

    fn warm_start(&self, now: f64) -> Option<Vec<ControlVector>> {
        self.stored.as_ref().map(|p| shift_controls(&p.us, (now - p.time) / self.cfg.dt))
    }
}

impl Controller for ConvoyAgent {
    fn act(&mut self, obs: &Observation, env: &Environment<'_>) -> Result<AgentOutput, ConvoyError> {
        let replan = self.calls.is_multiple_of(self.cfg.replan_every) || self.stored.is_none();
        self.calls += 1;
        if !replan {
            let plan = self.stored.as_ref().unwrap();
            let control = ControlInput::from_vector(&self.replay(plan, obs.time));
            return Ok(AgentOutput { control, fallback: plan.fallback, w_lead: plan.w_lead, w_follow: plan.w_follow, solved: false });
        }

        let warm = self.warm_start(obs.time);
        let plan = compute_control(obs, env.path, &self.cfg, &self.params, warm.as_deref(), self.s_hint)?;
        self.s_hint = Some(plan.own_s);
        let states = plan.solve.states();
        let clearance = self.cfg.planner.clearance;
        let blocked = env.map.is_some_and(|m| !path_clear(m, &states, clearance));

        let stored = if blocked {
            let map = env.map.unwrap();
            let (theta_t, idx) = planner::lookahead_direction(&states, self.cfg.d_lookahead, &obs.own);
            let v_tc = states[idx].v.max(0.0);
            let d1 = match (plan.reference.as_ref().and_then(|r| r.lead_s.as_ref()), plan.d_ref_lead) {
                (Some(s), Some(_)) => env.path.s_diff(s[0], plan.own_s),
                _ => plan.d_ref_lead.unwrap_or(0.0),
            };
            let d2 = match plan.reference.as_ref().and_then(|r| r.follow_s.as_ref()) {
                Some(s) => env.path.s_diff(plan.own_s, s[0]),
                None => 0.0,
            };
            let d_ref = plan.d_ref_lead.unwrap_or(d1);
            let v_target = planner::scaled_velocity(&self.cfg, v_tc, d1, d2, d_ref, self.params.v_max);
            let decision = planner::plan(&obs.own, map, theta_t, v_target, &self.cfg.planner, &self.params);
            if decision.stopped {
                StoredPlan {
                    time: obs.time,
                    us: vec![ControlVector::new(-self.params.a_max, 0.0); self.cfg.horizon],
                    xs: vec![obs.own],
                    fallback: true,
                    w_lead: plan.w_lead,
                    w_follow: plan.w_follow,
                }
            } else {
                let follow = planner::follow(&decision, &obs.own, &self.cfg, &self.params, warm.as_deref())?;
                StoredPlan {
                    time: obs.time,
                    xs: follow.states(),
                    us: follow.us,
                    fallback: true,
                    w_lead: plan.w_lead,
                    w_follow: plan.w_follow,
                }
            }
        } else {
            StoredPlan {
                time: obs.time,
                xs: states,
                us: plan.solve.us.clone(),
                fallback: false,
                w_lead: plan.w_lead,
                w_follow: plan.w_follow,
            }
        };
        let control = ControlInput::from_vector(&stored.us[0]).clamped(&self.params);
        let out = AgentOutput { control, fallback: stored.fallback, w_lead: stored.w_lead, w_follow: stored.w_follow, solved: true };
        self.stored = Some(stored);
        Ok(out)
    }
}

impl ConvoyAgent {
    /// States of the most recent plan (empty before the first call).
    pub fn last_plan(&self) -> &[VehicleState] {
        self.stored.as_ref().map(|p| p.xs.as_slice()).unwrap_or(&[])
    }
}
