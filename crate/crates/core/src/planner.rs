//! Obstacle fallback: a fan of constant-curvature arcs scored against the
//! direction the convoy plan wanted to go, tracked with a pure path-following
//! iLQR at a gap-corrected speed.

use crate::convoy::{frame_weight, ConvoyConfig};
use crate::dynamics::{self, ControlVector, VehicleParams, VehicleState};
use crate::geometry::{path_clear, OccupancyMap, Path};
use crate::ilqr::{self, BicycleModel, IlqrError, SolveResult, SolverOptions, StageCost, TerminalCost};
use crate::quadform::{combine, QuadraticTerm};
use nalgebra::Point2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("invalid planner configuration: {0}")]
    BadConfig(String),
    #[error("cannot follow a stop decision")]
    StopDecision,
    #[error(transparent)]
    Solver(#[from] IlqrError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Number of candidate arcs (odd, so one is straight).
    pub arcs: usize,
    /// Number of initial-direction groups.
    pub groups: usize,
    pub min_arc_length: f64,
    /// Arc length per unit of target speed (s).
    pub arc_length_per_speed: f64,
    /// Footprint radius for obstacle checks (m).
    pub clearance: f64,
    /// Spacing of arc samples (m).
    pub sample_spacing: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { arcs: 31, groups: 7, min_arc_length: 3.0, arc_length_per_speed: 1.5, clearance: 0.4, sample_spacing: 0.1 }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::BadConfig(m.into()));
        if self.arcs == 0 || self.arcs.is_multiple_of(2) {
            return bad("arc count must be odd");
        }
        if self.groups == 0 || self.groups > self.arcs {
            return bad("group count must be between 1 and the arc count");
        }
        if !(self.min_arc_length > 0.0 && self.arc_length_per_speed >= 0.0) {
            return bad("arc lengths must be positive");
        }
        if !(self.clearance >= 0.0 && self.sample_spacing > 0.0) {
            return bad("clearance must be non-negative and sample spacing positive");
        }
        Ok(())
    }

    pub fn arc_length(&self, v_target: f64) -> f64 {
        self.min_arc_length.max(self.arc_length_per_speed * v_target)
    }
}

/// One candidate: a constant-curvature arc starting at the agent's pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateArc {
    pub curvature: f64,
    pub samples: Vec<VehicleState>,
}

impl CandidateArc {
    pub fn endpoint(&self) -> &VehicleState {
        self.samples.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcFan {
    pub arcs: Vec<CandidateArc>,
    /// Initial-direction group of each arc.
    pub group_of: Vec<usize>,
    pub length: f64,
    pub max_curvature: f64,
}

impl ArcFan {
    /// Evenly spaced curvatures in `[-max_curvature, max_curvature]`.
    pub fn new(own: &VehicleState, max_curvature: f64, length: f64, cfg: &PlannerConfig) -> Self {
        let m = cfg.arcs;
        let steps = (length / cfg.sample_spacing).ceil().max(1.0) as usize;
        let mut arcs = Vec::with_capacity(m);
        let mut group_of = Vec::with_capacity(m);
        for j in 0..m {
            let kappa = if m == 1 { 0.0 } else { max_curvature * (2.0 * j as f64 / (m - 1) as f64 - 1.0) };
            let samples = (0..=steps)
                .map(|i| {
                    let s = length * i as f64 / steps as f64;
                    arc_point(own, kappa, s)
                })
                .collect();
            arcs.push(CandidateArc { curvature: kappa, samples });
            group_of.push(group_index(j, m, cfg.groups));
        }
        Self { arcs, group_of, length, max_curvature }
    }
}

/// Buckets arc `j` of `m` into `groups` equal-width curvature bands placed
/// symmetrically about the straight arc.
fn group_index(j: usize, m: usize, groups: usize) -> usize {
    if m == 1 || groups == 1 {
        return 0;
    }
    let u = 2.0 * j as f64 / (m - 1) as f64 - 1.0;
    let half = (groups - 1) as f64 / 2.0;
    ((u * half).round() + half).clamp(0.0, (groups - 1) as f64) as usize
}

/// Pose after driving arc length `s` at constant curvature from `start`.
fn arc_point(start: &VehicleState, kappa: f64, s: f64) -> VehicleState {
    let psi = start.psi + kappa * s;
    let (x, y) = if kappa.abs() < 1e-9 {
        (start.x + s * start.psi.cos(), start.y + s * start.psi.sin())
    } else {
        (start.x + (psi.sin() - start.psi.sin()) / kappa, start.y - (psi.cos() - start.psi.cos()) / kappa)
    };
    VehicleState::new(x, y, psi, start.v)
}

/// The planner's pick; `stopped` means every arc was blocked.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerDecision {
    pub chosen_path: Option<Path>,
    pub curvature: f64,
    pub v_target: f64,
    pub theta_target: f64,
    pub fallback_active: bool,
    pub stopped: bool,
}

/// Target speed corrected for the lead gap error and the follower distance.
pub fn scaled_velocity(cfg: &ConvoyConfig, v_tc: f64, d1: f64, d2: f64, d_ref: f64, v_max: f64) -> f64 {
    let alpha = cfg.lambda3 * (d1 - d_ref) - cfg.lambda4 * d2;
    ((1.0 + alpha) * v_tc).clamp(0.0, v_max)
}

/// Bearing from `own` to the first plan point at least `d_lookahead` along
/// the plan (the last point if the plan is shorter), and that point's index.
pub fn lookahead_direction(plan: &[VehicleState], d_lookahead: f64, own: &VehicleState) -> (f64, usize) {
    let mut idx = plan.len() - 1;
    let mut acc = 0.0;
    for k in 1..plan.len() {
        acc += plan[k].distance_to(&plan[k - 1]);
        if acc >= d_lookahead {
            idx = k;
            break;
        }
    }
    let target = plan[idx];
    let (dx, dy) = (target.x - own.x, target.y - own.y);
    if dx.hypot(dy) < 1e-9 {
        return (own.psi, idx);
    }
    (dy.atan2(dx), idx)
}

/// Picks the best obstacle-free arc: arcs are scored by how well their
/// endpoint bearing matches `theta_target`, scores are summed per group, and
/// the best arc of the best group wins (ties go to the straighter arc).
pub fn plan(
    own: &VehicleState,
    map: &OccupancyMap,
    theta_target: f64,
    v_target: f64,
    cfg: &PlannerConfig,
    params: &VehicleParams,
) -> PlannerDecision {
    let fan = ArcFan::new(own, params.max_curvature(), cfg.arc_length(v_target), cfg);
    select(own, map, theta_target, v_target, cfg, &fan)
}

/// [`plan`] over a prebuilt fan.
pub fn select(
    own: &VehicleState,
    map: &OccupancyMap,
    theta_target: f64,
    v_target: f64,
    cfg: &PlannerConfig,
    fan: &ArcFan,
) -> PlannerDecision {
    let score = |a: &CandidateArc| {
        let e = a.endpoint();
        let bearing = (e.y - own.y).atan2(e.x - own.x);
        dynamics::angle_diff(bearing, theta_target).cos()
    };
    let feasible: Vec<(usize, f64)> =
        fan.arcs.iter().enumerate().filter(|(_, a)| path_clear(map, &a.samples, cfg.clearance)).map(|(i, a)| (i, score(a))).collect();
    let stop = PlannerDecision { chosen_path: None, curvature: 0.0, v_target: 0.0, theta_target, fallback_active: true, stopped: true };
    if feasible.is_empty() {
        return stop;
    }
    let mut group_score = vec![None::<f64>; cfg.groups];
    for &(i, s) in &feasible {
        let g = &mut group_score[fan.group_of[i]];
        *g = Some(g.unwrap_or(0.0) + s);
    }
    // best group; ties go to the group nearest the straight-ahead one
    let center = fan.group_of[fan.arcs.len() / 2] as i64;
    let best_group = (0..cfg.groups)
        .filter_map(|g| group_score[g].map(|s| (g, s)))
        .max_by(|a, b| a.1.total_cmp(&b.1).then(((b.0 as i64 - center).abs()).cmp(&(a.0 as i64 - center).abs())))
        .unwrap()
        .0;
    let &(best, _) = feasible
        .iter()
        .filter(|(i, _)| fan.group_of[*i] == best_group)
        .max_by(|a, b| a.1.total_cmp(&b.1).then(fan.arcs[b.0].curvature.abs().total_cmp(&fan.arcs[a.0].curvature.abs())))
        .unwrap();
    let arc = &fan.arcs[best];
    let points = arc.samples.iter().map(|s| Point2::new(s.x, s.y)).collect();
    match Path::from_points(points, false) {
        Ok(path) => PlannerDecision {
            chosen_path: Some(path),
            curvature: arc.curvature,
            v_target,
            theta_target,
            fallback_active: true,
            stopped: false,
        },
        Err(_) => stop,
    }
}

/// Pure tracking iLQR along the chosen arc at the decision's target speed.
/// References past the end of the arc continue straight along its final
/// heading.
pub fn follow(
    decision: &PlannerDecision,
    own: &VehicleState,
    cfg: &ConvoyConfig,
    params: &VehicleParams,
    warm: Option<&[ControlVector]>,
) -> Result<SolveResult, PlannerError> {
    let path = match (&decision.chosen_path, decision.stopped) {
        (Some(p), false) => p,
        _ => return Err(PlannerError::StopDecision),
    };
    let n = cfg.horizon;
    let s0 = path.project(&Point2::new(own.x, own.y));
    let end = path.pose_at(path.length());
    let refs: Vec<VehicleState> = (0..=n)
        .map(|k| {
            let s = s0 + decision.v_target * cfg.dt * k as f64;
            let over = s - path.length();
            if over > 0.0 {
                VehicleState::new(end.x + over * end.heading.cos(), end.y + over * end.heading.sin(), end.heading, decision.v_target)
            } else {
                let p = path.pose_at(s);
                VehicleState::new(p.x, p.y, p.heading, decision.v_target)
            }
        })
        .collect();
    let fuse = |q: &nalgebra::Matrix4<f64>, r: &VehicleState| {
        combine(&[QuadraticTerm::new(frame_weight(q, r.psi), r.to_vector()).expect("validated weight")])
            .map_err(|_| PlannerError::BadConfig("tracking weight must be positive definite".into()))
    };
    let mut stages = Vec::with_capacity(n);
    for r in &refs[..n] {
        stages.push(StageCost::new(fuse(&cfg.q, r)?, cfg.r)?);
    }
    let terminal = TerminalCost { state_cost: fuse(&cfg.q_f, &refs[n])? };
    let model = BicycleModel { params: *params, dt: cfg.dt };
    let zeros = vec![ControlVector::zeros(); n];
    let init = match warm {
        Some(w) if w.len() == n => w,
        _ => &zeros,
    };
    let opts = SolverOptions { max_iter: cfg.max_iter, tol: cfg.tol, ..SolverOptions::default() };
    Ok(ilqr::solve(&model, &own.to_vector(), init, &stages, &terminal, &opts)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn open_map() -> OccupancyMap {
        OccupancyMap::new([-20.0, -20.0], 0.1, 400, 400).unwrap()
    }

    fn cfg() -> ConvoyConfig {
        ConvoyConfig::default()
    }

    #[test]
    fn velocity_scaling() {
        let mut c = cfg();
        c.lambda3 = 0.1;
        c.lambda4 = 0.0;
        assert_abs_diff_eq!(scaled_velocity(&c, 4.0, 6.0, 0.0, 6.0, 10.0), 4.0);
        assert_abs_diff_eq!(scaled_velocity(&c, 4.0, 8.0, 0.0, 6.0, 10.0), 4.8, epsilon = 1e-12);
        c.lambda3 = 0.0;
        c.lambda4 = 0.1;
        assert_abs_diff_eq!(scaled_velocity(&c, 4.0, 6.0, 5.0, 6.0, 10.0), 2.0, epsilon = 1e-12);
        // clamped to the admissible range
        assert_eq!(scaled_velocity(&c, 4.0, 6.0, 50.0, 6.0, 10.0), 0.0);
    }

    #[test]
    fn velocity_scaling_is_monotone() {
        let c = cfg();
        let mut last = 0.0;
        for i in 0..50 {
            let v = scaled_velocity(&c, 4.0, i as f64 * 0.5, 5.0, 6.0, 10.0);
            assert!(v >= last);
            last = v;
        }
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let v = scaled_velocity(&c, 4.0, 6.0, i as f64 * 0.5, 6.0, 10.0);
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn lookahead_on_straight_and_short_plans() {
        let own = VehicleState::new(0.0, 0.0, 0.0, 1.0);
        let plan: Vec<_> = (0..20).map(|i| VehicleState::new(i as f64, 0.0, 0.0, 1.0)).collect();
        assert_abs_diff_eq!(lookahead_direction(&plan, 5.0, &own).0, 0.0);
        let short: Vec<_> = (0..3).map(|i| VehicleState::new(i as f64, i as f64, 0.0, 1.0)).collect();
        let (theta, idx) = lookahead_direction(&short, 50.0, &own);
        assert_eq!(idx, 2);
        assert_abs_diff_eq!(theta, PI / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn lookahead_on_a_quarter_circle() {
        // radius 10 quarter turn starting at the origin heading +x
        let start = VehicleState::new(0.0, 0.0, 0.0, 1.0);
        let n = 20_000;
        let plan: Vec<_> = (0..=n).map(|i| arc_point(&start, 0.1, 5.0 * PI * i as f64 / n as f64)).collect();
        let (theta, idx) = lookahead_direction(&plan, 2.5 * PI, &start);
        let mid = plan[idx];
        // chord to the arc midpoint bisects the swept angle
        assert_abs_diff_eq!(mid.x, 10.0 * (PI / 4.0).sin(), epsilon = 1e-2);
        assert_abs_diff_eq!(theta, PI / 8.0, epsilon = 1e-3);
    }

    #[test]
    fn fan_geometry() {
        let own = VehicleState::new(1.0, 2.0, 0.3, 2.0);
        let pc = PlannerConfig::default();
        let fan = ArcFan::new(&own, 1.2, 3.0, &pc);
        assert_eq!(fan.arcs.len(), 31);
        assert_eq!(fan.arcs[15].curvature, 0.0);
        assert_eq!(fan.group_of[15], 3);
        assert_eq!(fan.group_of[0], 0);
        assert_eq!(fan.group_of[30], 6);
        for a in &fan.arcs {
            // samples lie on the circle (or line) the curvature describes
            let len: f64 = a.samples.windows(2).map(|w| w[1].distance_to(&w[0])).sum();
            assert!((len - 3.0).abs() < 5e-3);
        }
    }

    #[test]
    fn open_map_goes_straight() {
        let own = VehicleState::new(0.0, 0.0, 0.4, 2.0);
        let d = plan(&own, &open_map(), 0.4, 2.0, &PlannerConfig::default(), &VehicleParams::default());
        assert!(!d.stopped);
        assert_eq!(d.curvature, 0.0);
    }

    #[test]
    fn wall_on_the_left_is_avoided() {
        let mut map = open_map();
        let pc = PlannerConfig::default();
        let params = VehicleParams::default();
        // wall along y = 0.6 blocks every left-curving arc
        for ix in 0..400 {
            map.fill_disk(-20.0 + ix as f64 * 0.1, 0.6, 0.05, true);
        }
        let own = VehicleState::new(0.0, 0.0, 0.0, 2.0);
        let theta = 0.2;
        let d = plan(&own, &map, theta, 2.0, &pc, &params);
        assert!(!d.stopped);
        assert!(d.curvature <= 0.0);
        let chosen = d.chosen_path.unwrap();
        let states: Vec<_> = chosen.points().iter().map(|p| VehicleState::new(p.x, p.y, 0.0, 0.0)).collect();
        assert!(path_clear(&map, &states, pc.clearance));

        // exhaustive oracle over the fan
        let fan = ArcFan::new(&own, params.max_curvature(), pc.arc_length(2.0), &pc);
        let feasible: Vec<usize> = (0..fan.arcs.len()).filter(|&i| path_clear(&map, &fan.arcs[i].samples, pc.clearance)).collect();
        assert!(feasible.iter().all(|&i| fan.arcs[i].curvature <= 0.0));
        let score = |i: usize| {
            let e = fan.arcs[i].endpoint();
            (e.y.atan2(e.x) - theta).cos()
        };
        let mut sums = vec![f64::NEG_INFINITY; pc.groups];
        for &i in &feasible {
            let g = fan.group_of[i];
            sums[g] = if sums[g].is_finite() { sums[g] + score(i) } else { score(i) };
        }
        let best_group = (0..pc.groups).max_by(|a, b| sums[*a].total_cmp(&sums[*b])).unwrap();
        let best =
            feasible.iter().copied().filter(|&i| fan.group_of[i] == best_group).max_by(|a, b| score(*a).total_cmp(&score(*b))).unwrap();
        assert_abs_diff_eq!(d.curvature, fan.arcs[best].curvature);
    }

    #[test]
    fn walled_in_stops() {
        let mut map = open_map();
        for iy in 0..400 {
            for ix in 0..400 {
                let d = map.cell_distance(ix, iy, 0.0, 0.0);
                map.set(ix, iy, d > 0.6 && d < 3.0);
            }
        }
        let own = VehicleState::new(0.0, 0.0, 0.0, 2.0);
        let d = plan(&own, &map, 0.0, 2.0, &PlannerConfig::default(), &VehicleParams::default());
        assert!(d.stopped);
        assert_eq!(d.v_target, 0.0);
        assert_eq!(follow(&d, &own, &cfg(), &VehicleParams::default(), None), Err(PlannerError::StopDecision));
    }

    #[test]
    fn following_an_arc() {
        let params = VehicleParams::default();
        let c = cfg();
        let own = VehicleState::new(0.0, 0.0, 0.0, 2.0);
        let d = plan(&own, &open_map(), 0.0, 2.0, &PlannerConfig::default(), &params);
        let sol = follow(&d, &own, &c, &params, None).unwrap();
        assert!(sol.us.iter().all(|u| u.amax() < 0.05));

        let offset = VehicleState::new(0.0, 0.5, 0.0, 2.0);
        let sol = follow(&d, &offset, &c, &params, None).unwrap();
        let ys: Vec<f64> = sol.xs.iter().map(|x| x[1].abs()).collect();
        assert!(ys.last().unwrap() < &0.25);
        assert!(ys.windows(2).all(|w| w[1] <= w[0] + 1e-3), "{ys:?}");
    }
}
