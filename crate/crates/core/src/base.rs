//! Leader-follower baseline: each follower records its predecessor's driven
//! path, steers along it by pure pursuit and keeps spacing with a
//! spring-damper on the gap to the predecessor. The head of the column
//! tracks the reference path by pure pursuit at the target speed. The
//! obstacle fallback is the same arc planner the convoy controller uses.

use crate::agent::{AgentOutput, Controller, Environment, NeighborSnapshot, Observation};
use crate::convoy::{ConvoyConfig, ConvoyError};
use crate::dynamics::{self, ControlInput, VehicleParams, VehicleState};
use crate::geometry::{path_clear, Path};
use crate::planner;
use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    /// Spring gain on the gap error (1/s^2).
    pub k_spring: f64,
    /// Damping gain on the speed difference (1/s).
    pub k_damp: f64,
    /// Look-ahead time: the pursuit point sits `lookahead_gain * v` ahead (s).
    pub lookahead_gain: f64,
    pub min_lookahead: f64,
    /// Desired gap to the predecessor (m).
    pub d_desired: f64,
    /// Minimum displacement between stored trace poses (m).
    pub trace_ds: f64,
    pub trace_capacity: usize,
    /// Speed-tracking gain of the column head (1/s).
    pub k_speed: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        // critically damped unit-mass spacing loop: k_damp = 2 sqrt(k_spring)
        Self {
            k_spring: 0.5,
            k_damp: 2.0 * 0.5f64.sqrt(),
            lookahead_gain: 0.6,
            min_lookahead: 1.0,
            d_desired: 6.0,
            trace_ds: 0.2,
            trace_capacity: 2000,
            k_speed: 1.0,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self) -> Result<(), ConvoyError> {
        let ok = self.k_spring >= 0.0
            && self.k_damp >= 0.0
            && self.lookahead_gain >= 0.0
            && self.min_lookahead > 0.0
            && self.d_desired > 0.0
            && self.trace_ds >= 0.0
            && self.trace_capacity >= 2
            && self.k_speed >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ConvoyError::BadConfig("base controller gains must be non-negative, d_desired positive".into()))
        }
    }
}

/// Bounded history of the predecessor's poses.
#[derive(Debug, Clone, PartialEq)]
pub struct LeaderTrace {
    poses: VecDeque<(f64, VehicleState)>,
    capacity: usize,
    trace_ds: f64,
}

impl LeaderTrace {
    pub fn new(capacity: usize, trace_ds: f64) -> Self {
        Self { poses: VecDeque::with_capacity(capacity), capacity: capacity.max(1), trace_ds }
    }

    /// Stores the snapshot if it is newer than, and at least `trace_ds` away
    /// from, the last stored pose; evicts the oldest pose when full.
    pub fn record(&mut self, snap: &NeighborSnapshot) {
        if let Some((t, last)) = self.poses.back() {
            if snap.timestamp <= *t || snap.state.distance_to(last) < self.trace_ds {
                return;
            }
        }
        if self.poses.len() == self.capacity {
            self.poses.pop_front();
        }
        self.poses.push_back((snap.timestamp, snap.state));
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &(f64, VehicleState)> {
        self.poses.iter()
    }

    /// Drops poses more than `keep` metres behind the follower's projection,
    /// so a trace that crosses itself cannot capture the projection.
    pub fn prune_passed(&mut self, own: &VehicleState, keep: f64) {
        let pts: Vec<Point2<f64>> = self.poses.iter().map(|(_, s)| Point2::new(s.x, s.y)).collect();
        if pts.len() < 3 {
            return;
        }
        let s_own = project_polyline(&pts, &Point2::new(own.x, own.y));
        let mut acc = 0.0;
        let mut drop = 0;
        for w in pts.windows(2) {
            acc += (w[1] - w[0]).norm();
            if acc >= s_own - keep {
                break;
            }
            drop += 1;
        }
        self.poses.drain(..drop.min(self.poses.len() - 2));
    }
}

/// Polyline through the stored trace, closed off at the lead's current position.
fn trace_polyline(trace: &LeaderTrace, lead: &VehicleState) -> Vec<Point2<f64>> {
    let mut pts: Vec<Point2<f64>> = trace.poses().map(|(_, s)| Point2::new(s.x, s.y)).collect();
    let head = Point2::new(lead.x, lead.y);
    if pts.last().is_none_or(|p| (p - head).norm() > 1e-9) {
        pts.push(head);
    }
    pts
}

/// Arc length of the closest point on a polyline.
fn project_polyline(pts: &[Point2<f64>], q: &Point2<f64>) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    let mut s0 = 0.0;
    for w in pts.windows(2) {
        let ab = w[1] - w[0];
        let len = ab.norm();
        let t = if len > 0.0 { ((q - w[0]).dot(&ab) / (len * len)).clamp(0.0, 1.0) } else { 0.0 };
        let d = (q - (w[0] + ab * t)).norm();
        if d < best.0 {
            best = (d, s0 + t * len);
        }
        s0 += len;
    }
    best.1
}

fn polyline_length(pts: &[Point2<f64>]) -> f64 {
    pts.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Point at arc length `s` along the polyline, extrapolating past the end
/// along the last segment's direction.
fn polyline_point(pts: &[Point2<f64>], s: f64) -> Point2<f64> {
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let len = (w[1] - w[0]).norm();
        if acc + len >= s && len > 0.0 {
            return w[0] + (w[1] - w[0]) * ((s - acc) / len).max(0.0);
        }
        acc += len;
    }
    let n = pts.len();
    if n >= 2 {
        let dir = pts[n - 1] - pts[n - 2];
        if dir.norm() > 0.0 {
            return pts[n - 1] + dir.normalize() * (s - acc);
        }
    }
    pts[n - 1]
}

/// Pure-pursuit steering toward `target`.
pub fn pure_pursuit(own: &VehicleState, target: &Point2<f64>, params: &VehicleParams) -> f64 {
    let d = Vector2::new(target.x - own.x, target.y - own.y);
    let ld = d.norm();
    if ld < 1e-9 {
        return 0.0;
    }
    let alpha = dynamics::angle_diff(d.y.atan2(d.x), own.psi);
    (2.0 * params.wheelbase * alpha.sin() / ld).atan().clamp(-params.delta_max, params.delta_max)
}

/// Follower law: pursue the recorded trace, spring-damper on the gap.
pub fn base_control(
    own: &VehicleState,
    trace: &LeaderTrace,
    lead: &NeighborSnapshot,
    cfg: &BaseConfig,
    params: &VehicleParams,
) -> ControlInput {
    if trace.is_empty() {
        return ControlInput::new(-cfg.k_damp * own.v, 0.0).clamped(params);
    }
    let pts = trace_polyline(trace, &lead.state);
    follow_law(own, &pts, &lead.state, 0.0, cfg, params)
}

/// Pursuit along `pts` plus spacing on the gap to a lead that has moved
/// `lead_travel` metres past the end of `pts`.
fn follow_law(
    own: &VehicleState,
    pts: &[Point2<f64>],
    lead: &VehicleState,
    lead_travel: f64,
    cfg: &BaseConfig,
    params: &VehicleParams,
) -> ControlInput {
    let q = Point2::new(own.x, own.y);
    let s_own = if pts.len() >= 2 { project_polyline(pts, &q) } else { 0.0 };
    let total = polyline_length(pts);
    let gap = if pts.len() >= 2 { total - s_own + lead_travel } else { own.distance_to(lead) + lead_travel };
    let lookahead = cfg.min_lookahead.max(cfg.lookahead_gain * own.v);
    let target = if pts.len() >= 2 { polyline_point(pts, s_own + lookahead) } else { pts[0] };
    let delta = pure_pursuit(own, &target, params);
    let a = cfg.k_spring * (gap - cfg.d_desired) - cfg.k_damp * (own.v - lead.v);
    ControlInput::new(a, delta).clamped(params)
}

/// Head-of-column law: pure pursuit on the reference path, proportional
/// speed control toward `v_target`.
pub fn leader_control(
    own: &VehicleState,
    path: &Path,
    s_own: f64,
    v_target: f64,
    cfg: &BaseConfig,
    params: &VehicleParams,
) -> ControlInput {
    let lookahead = cfg.min_lookahead.max(cfg.lookahead_gain * own.v);
    let p = path.pose_at(s_own + lookahead);
    let delta = pure_pursuit(own, &Point2::new(p.x, p.y), params);
    let at_end = !path.is_closed() && s_own >= path.length() - 1e-6;
    let v_ref = if at_end { 0.0 } else { v_target };
    ControlInput::new(cfg.k_speed * (v_ref - own.v), delta).clamped(params)
}

/// Baseline agent with the shared obstacle fallback.
#[derive(Debug, Clone)]
pub struct BaseAgent {
    pub cfg: BaseConfig,
    /// Supplies the target speed, horizon and fallback parameters.
    pub convoy: ConvoyConfig,
    pub params: VehicleParams,
    trace: LeaderTrace,
    s_hint: Option<f64>,
}

impl BaseAgent {
    pub fn new(cfg: BaseConfig, convoy: ConvoyConfig, params: VehicleParams) -> Result<Self, ConvoyError> {
        cfg.validate()?;
        convoy.validate()?;
        params.validate().map_err(|e| ConvoyError::BadConfig(e.to_string()))?;
        let trace = LeaderTrace::new(cfg.trace_capacity, cfg.trace_ds);
        Ok(Self { cfg, convoy, params, trace, s_hint: None })
    }

    pub fn trace(&self) -> &LeaderTrace {
        &self.trace
    }

    /// Closed-loop rollout of the baseline's own law over the horizon, with
    /// the lead extrapolated at constant speed. This is what the obstacle
    /// check inspects.
    fn predicted(&self, own: &VehicleState, lead: Option<&NeighborSnapshot>, path: &Path, s_own: f64) -> Vec<VehicleState> {
        let dt = self.convoy.dt;
        let pts = lead.map(|l| trace_polyline(&self.trace, &l.state));
        let mut out = vec![*own];
        let mut s = s_own;
        for k in 0..self.convoy.horizon {
            let x = out[k];
            let u = match (lead, &pts) {
                (Some(l), Some(pts)) if !self.trace.is_empty() => {
                    follow_law(&x, pts, &l.state, l.state.v * dt * k as f64, &self.cfg, &self.params)
                }
                (Some(_), _) => ControlInput::new(-self.cfg.k_damp * x.v, 0.0).clamped(&self.params),
                (None, _) => {
                    s = path.project_near(&Point2::new(x.x, x.y), s, 2.0 + x.v * dt);
                    leader_control(&x, path, s, self.convoy.v_t, &self.cfg, &self.params)
                }
            };
            out.push(dynamics::step(&x, &u, dt, &self.params).unwrap_or(x));
        }
        out
    }
}

impl Controller for BaseAgent {
    fn act(&mut self, obs: &Observation, env: &Environment<'_>) -> Result<AgentOutput, ConvoyError> {
        let own = obs.own;
        let q = Point2::new(own.x, own.y);
        let s_own = match self.s_hint {
            Some(h) => env.path.project_near(&q, h, 10.0 + 2.0 * own.v.abs()),
            None => env.path.project(&q),
        };
        self.s_hint = Some(s_own);
        // reads the lead only; the follower never enters this law
        let control = match &obs.lead {
            Some(lead) => {
                self.trace.record(lead);
                self.trace.prune_passed(&own, 2.0 * self.cfg.trace_ds.max(0.5));
                base_control(&own, &self.trace, lead, &self.cfg, &self.params)
            }
            None => leader_control(&own, env.path, s_own, self.convoy.v_t, &self.cfg, &self.params),
        };
        let mut out = AgentOutput { control, fallback: false, w_lead: None, w_follow: None, solved: true };
        let Some(map) = env.map else {
            return Ok(out);
        };
        let predicted = self.predicted(&own, obs.lead.as_ref(), env.path, s_own);
        if path_clear(map, &predicted, self.convoy.planner.clearance) {
            return Ok(out);
        }
        let (theta_t, idx) = planner::lookahead_direction(&predicted, self.convoy.d_lookahead, &own);
        let v_tc = predicted[idx].v.max(0.0);
        let (d1, d_ref) = match &obs.lead {
            Some(lead) => {
                let s_lead =
                    env.path.project_near(&Point2::new(lead.state.x, lead.state.y), s_own + self.cfg.d_desired, 20.0 + self.cfg.d_desired);
                (env.path.s_diff(s_lead, s_own), self.cfg.d_desired)
            }
            None => (0.0, 0.0),
        };
        let v_target = planner::scaled_velocity(&self.convoy, v_tc, d1, 0.0, d_ref, self.params.v_max);
        let decision = planner::plan(&own, map, theta_t, v_target, &self.convoy.planner, &self.params);
        out.fallback = true;
        out.control = if decision.stopped {
            ControlInput::new(-self.params.a_max, 0.0)
        } else {
            let sol = planner::follow(&decision, &own, &self.convoy, &self.params, None)?;
            sol.first_control().clamped(&self.params)
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn snap(t: f64, x: f64, y: f64, v: f64) -> NeighborSnapshot {
        NeighborSnapshot { agent_id: 0, state: VehicleState::new(x, y, 0.0, v), timestamp: t }
    }

    fn straight_trace(upto: f64) -> LeaderTrace {
        let mut tr = LeaderTrace::new(1000, 0.2);
        let n = (upto / 0.5) as usize;
        for i in 0..=n {
            tr.record(&snap(i as f64, i as f64 * 0.5, 0.0, 2.0));
        }
        tr
    }

    #[test]
    fn trace_recording() {
        let mut tr = LeaderTrace::new(100, 0.5);
        for t in 0..50 {
            tr.record(&snap(t as f64, 3.0, 1.0, 0.0));
        }
        assert_eq!(tr.len(), 1);
        let mut tr = LeaderTrace::new(100, 0.5);
        for t in 0..50 {
            tr.record(&snap(t as f64, t as f64, 0.0, 1.0));
        }
        assert_eq!(tr.len(), 50);
        for t in 50..130 {
            tr.record(&snap(t as f64, t as f64, 0.0, 1.0));
        }
        assert_eq!(tr.len(), 100);
        let xs: Vec<f64> = tr.poses().map(|(_, s)| s.x).collect();
        assert_eq!(xs[0], 30.0);
        assert!(xs.windows(2).all(|w| w[1] > w[0]));
        // stale or repeated timestamps are ignored
        tr.record(&snap(5.0, 500.0, 0.0, 1.0));
        assert_eq!(tr.len(), 100);
    }

    #[test]
    fn equilibrium_and_spring() {
        let cfg = BaseConfig { d_desired: 5.0, ..BaseConfig::default() };
        let p = VehicleParams::default();
        let trace = straight_trace(20.0);
        let lead = snap(41.0, 20.0, 0.0, 2.0);
        let own = VehicleState::new(15.0, 0.0, 0.0, 2.0);
        let u = base_control(&own, &trace, &lead, &cfg, &p);
        assert_abs_diff_eq!(u.a, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u.delta, 0.0, epsilon = 1e-12);
        let own = VehicleState::new(13.0, 0.0, 0.0, 2.0);
        let u = base_control(&own, &trace, &lead, &cfg, &p);
        assert_abs_diff_eq!(u.a, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pursuit_steers_back_to_the_trace() {
        let cfg = BaseConfig::default();
        let p = VehicleParams::default();
        let trace = straight_trace(20.0);
        let lead = snap(41.0, 20.0, 0.0, 2.0);
        let own = VehicleState::new(10.0, 1.0, 0.0, 2.0);
        let u = base_control(&own, &trace, &lead, &cfg, &p);
        // closed form: target 1.2 m ahead on the trace, 1 m to the right
        let ld = cfg.lookahead_gain * 2.0;
        let alpha = (-1.0f64).atan2(ld);
        let expect = (2.0 * p.wheelbase * alpha.sin() / (1.0 + ld * ld).sqrt()).atan();
        assert!(u.delta < 0.0);
        assert_abs_diff_eq!(u.delta, expect, epsilon = 1e-9);
    }

    #[test]
    fn empty_trace_coasts() {
        let cfg = BaseConfig::default();
        let p = VehicleParams::default();
        let trace = LeaderTrace::new(10, 0.2);
        let own = VehicleState::new(0.0, 0.0, 0.0, 1.0);
        let u = base_control(&own, &trace, &snap(0.0, 5.0, 0.0, 1.0), &cfg, &p);
        assert_abs_diff_eq!(u.a, -cfg.k_damp);
        assert_eq!(u.delta, 0.0);
    }

    #[test]
    fn follower_state_is_never_read() {
        use crate::geometry::{straight, DEFAULT_DS};
        let path = straight(100.0, DEFAULT_DS).unwrap();
        let env = Environment { path: &path, map: None };
        let mut a = BaseAgent::new(BaseConfig::default(), ConvoyConfig::default(), VehicleParams::default()).unwrap();
        let mut b = a.clone();
        let own = VehicleState::new(10.0, 0.3, 0.1, 2.0);
        let lead = Some(snap(0.0, 16.0, 0.0, 2.0));
        let o1 = Observation { time: 0.0, own, lead, follow: None };
        let o2 = Observation { follow: Some(snap(0.0, 4.0, 0.5, 9.0)), ..o1 };
        assert_eq!(a.act(&o1, &env).unwrap(), b.act(&o2, &env).unwrap());
    }
}
