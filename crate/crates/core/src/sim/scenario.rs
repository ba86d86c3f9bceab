//! Scenario files: a TOML document describing the route, obstacles, the
//! convoy's starting line-up, disturbances and communication limits.
//!
//! Agents are numbered from 1 (the head of the column) to `agent_count`.

use crate::base::BaseConfig;
use crate::convoy::ConvoyConfig;
use crate::dynamics::{VehicleParams, VehicleState};
use crate::geometry::{self, OccupancyMap, Path, PathBuilder, DEFAULT_DS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot build path or map: {0}")]
    Geometry(#[from] geometry::GeometryError),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Convoy,
    Base,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControllerKind::Convoy => "convoy",
            ControllerKind::Base => "base",
        })
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "convoy" => Ok(ControllerKind::Convoy),
            "base" => Ok(ControllerKind::Base),
            other => Err(format!("unknown controller `{other}` (expected convoy or base)")),
        }
    }
}

/// Route generators. Every variant accepts an optional resampling step `ds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    Straight {
        length: f64,
        ds: Option<f64>,
    },
    LowCurvature {
        length: f64,
        amplitude: f64,
        wavelength: f64,
        ds: Option<f64>,
    },
    InfinityLoop {
        radius: f64,
        ds: Option<f64>,
    },
    TightTurns {
        radius: f64,
        leg: f64,
        turns: usize,
        ds: Option<f64>,
    },
    /// Straight entry, an S-bend of two opposite arcs, straight exit.
    Tunnel {
        length: f64,
        bend_radius: f64,
        bend_angle: f64,
        ds: Option<f64>,
    },
    RaceTrack {
        straight: f64,
        turn_radius: f64,
        chicane_radius: f64,
        ds: Option<f64>,
    },
    Waypoints {
        points: Vec<[f64; 2]>,
        #[serde(default)]
        closed: bool,
        ds: Option<f64>,
    },
}

impl PathSpec {
    pub fn build(&self) -> Result<Path, ScenarioError> {
        let step = |ds: &Option<f64>| ds.unwrap_or(DEFAULT_DS);
        let path = match self {
            PathSpec::Straight { length, ds } => geometry::straight(*length, step(ds))?,
            PathSpec::LowCurvature { length, amplitude, wavelength, ds } => {
                geometry::low_curvature(*length, *amplitude, *wavelength, step(ds))?
            }
            PathSpec::InfinityLoop { radius, ds } => geometry::infinity_loop(*radius, step(ds))?,
            PathSpec::TightTurns { radius, leg, turns, ds } => geometry::tight_turns(*radius, *leg, *turns, step(ds))?,
            PathSpec::Tunnel { length, bend_radius, bend_angle, ds } => {
                let bend = 4.0 * bend_radius * (0.5 * bend_angle).sin();
                let rest = length - bend;
                if rest <= 0.0 {
                    return Err(invalid("tunnel bend longer than the tunnel"));
                }
                PathBuilder::new(0.0, 0.0, 0.0, step(ds))
                    .line(0.5 * rest)
                    .arc(*bend_radius, *bend_angle)
                    .arc(*bend_radius, -bend_angle)
                    .line(0.5 * rest)
                    .build()?
            }
            PathSpec::RaceTrack { straight, turn_radius, chicane_radius, ds } => {
                geometry::race_track(*straight, *turn_radius, *chicane_radius, step(ds))?
            }
            PathSpec::Waypoints { points, closed, ds } => {
                if *closed {
                    geometry::build_closed_path(points, step(ds))?
                } else {
                    geometry::build_path(points, step(ds))?
                }
            }
        };
        Ok(path)
    }
}

/// Walls along the route: free space of `half_width` either side of the
/// centerline, bounded by walls `wall` thick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorridorSpec {
    pub half_width: f64,
    #[serde(default = "default_wall")]
    pub wall: f64,
}

fn default_wall() -> f64 {
    0.5
}

/// Occupancy grid generated around the route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    /// Extra free border around the route's bounding box (m).
    #[serde(default = "default_margin")]
    pub margin: f64,
    pub corridor: Option<CorridorSpec>,
    /// Round obstacles as `[x, y, radius]`.
    #[serde(default)]
    pub columns: Vec<[f64; 3]>,
}

fn default_resolution() -> f64 {
    0.1
}

fn default_margin() -> f64 {
    3.0
}

impl MapSpec {
    pub fn build(&self, path: &Path) -> Result<OccupancyMap, ScenarioError> {
        let mut map = OccupancyMap::around_path(path, self.margin, self.resolution)?;
        if let Some(c) = &self.corridor {
            map.add_corridor(path, c.half_width, c.wall);
        }
        for &[x, y, r] in &self.columns {
            map.fill_disk(x, y, r, true);
        }
        Ok(map)
    }
}

/// Initial line-up. By default the head starts at `s0` and the others
/// queue behind it at the steady-state gap.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartSpec {
    /// Arc length of the head (m); defaults to just enough room for the column.
    pub s0: Option<f64>,
    /// Initial gap (m); defaults to the convoy's steady gap.
    pub gap: Option<f64>,
    pub speed: f64,
    /// Seeded uniform perturbations, each drawn from `[-x, x]`.
    pub scatter_along: f64,
    pub scatter_lateral: f64,
    pub scatter_heading: f64,
    /// Explicit `[x, y, psi, v]` per agent, head first; overrides the rest.
    pub poses: Option<Vec<[f64; 4]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    /// Brake as hard as possible and hold still over `[t_start, t_start + duration)`.
    Stall { agent: usize, t_start: f64, duration: f64 },
    /// Lowers the agent's top speed from `t_start` on.
    SpeedCap {
        agent: usize,
        v_cap: f64,
        #[serde(default)]
        t_start: f64,
    },
}

impl Event {
    pub fn agent(&self) -> usize {
        match self {
            Event::Stall { agent, .. } | Event::SpeedCap { agent, .. } => *agent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusConfig {
    /// Snapshots per second per link.
    pub rate: f64,
    /// Delivery delay (s).
    pub latency: f64,
    pub drop_prob: f64,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self { rate: 20.0, latency: 0.05, drop_prob: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default)]
    pub seed: u64,
    pub agent_count: usize,
    /// Target cruise speed; overrides `convoy.v_t`.
    pub v_t: f64,
    /// Simulated time (s).
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_collision_radius")]
    pub collision_radius: f64,
    /// Samples before this time are left out of the averages (s).
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    pub path: PathSpec,
    pub map: Option<MapSpec>,
    #[serde(default)]
    pub start: StartSpec,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default)]
    pub bus: BusConfig,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub convoy: ConvoyConfig,
    /// Baseline gains; when absent the defaults are used with the desired
    /// gap set to the convoy's steady gap.
    pub base: Option<BaseConfig>,
}

fn default_dt() -> f64 {
    0.05
}

fn default_collision_radius() -> f64 {
    0.4
}

fn default_warmup() -> f64 {
    5.0
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let scn: Scenario = toml::from_str(text)?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario is always representable")
    }

    /// Convoy parameters with the scenario's cruise speed applied.
    pub fn convoy_config(&self) -> ConvoyConfig {
        ConvoyConfig { v_t: self.v_t, ..self.convoy.clone() }
    }

    pub fn base_config(&self) -> BaseConfig {
        self.base.clone().unwrap_or_else(|| BaseConfig { d_desired: self.convoy_config().steady_gap(), ..BaseConfig::default() })
    }

    /// The gap the error metric measures against.
    pub fn desired_gap(&self) -> f64 {
        match self.controller {
            ControllerKind::Convoy => self.convoy_config().steady_gap(),
            ControllerKind::Base => self.base.as_ref().map_or(self.convoy_config().steady_gap(), |b| b.d_desired),
        }
    }

    /// Static checks that need no geometry.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.agent_count < 1 {
            return Err(invalid("agent_count must be at least 1"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(invalid("duration must be positive"));
        }
        if !(self.dt > 0.0 && self.dt <= self.duration) {
            return Err(invalid("dt must be positive and no longer than the run"));
        }
        if !(self.v_t > 0.0) {
            return Err(invalid("v_t must be positive"));
        }
        if !(self.collision_radius >= 0.0) || !(self.warmup >= 0.0) {
            return Err(invalid("collision_radius and warmup must be non-negative"));
        }
        let b = &self.bus;
        if !(b.rate > 0.0) || !(b.latency >= 0.0) || !(0.0..=1.0).contains(&b.drop_prob) {
            return Err(invalid("bus needs rate > 0, latency >= 0 and drop_prob in [0, 1]"));
        }
        for ev in &self.events {
            if ev.agent() < 1 || ev.agent() > self.agent_count {
                return Err(invalid(format!("event refers to agent {} of {}", ev.agent(), self.agent_count)));
            }
            match *ev {
                Event::Stall { t_start, duration, .. } => {
                    if !(0.0..=self.duration).contains(&t_start) || !(duration >= 0.0) {
                        return Err(invalid("stall needs t_start within the run and a non-negative duration"));
                    }
                }
                Event::SpeedCap { v_cap, t_start, .. } => {
                    if !(v_cap > 0.0) || !(0.0..=self.duration).contains(&t_start) {
                        return Err(invalid("speed_cap needs v_cap > 0 and t_start within the run"));
                    }
                }
            }
        }
        if let Some(p) = &self.start.poses {
            if p.len() != self.agent_count {
                return Err(invalid(format!("{} start poses for {} agents", p.len(), self.agent_count)));
            }
        }
        self.vehicle.validate().map_err(|e| invalid(e.to_string()))?;
        self.convoy_config().validate().map_err(|e| invalid(e.to_string()))?;
        self.base_config().validate().map_err(|e| invalid(e.to_string()))?;
        Ok(())
    }

    /// Starting states, head first. Seeded scatter comes from its own
    /// random stream so the bus draws are unaffected by it.
    pub fn initial_states(&self, path: &Path) -> Result<Vec<VehicleState>, ScenarioError> {
        Ok(self.line_up(path)?.into_iter().map(|(st, _)| st).collect())
    }

    /// Starting states with the arc length each was placed at. Explicit
    /// poses are projected, which is ambiguous where the route touches itself.
    pub fn line_up(&self, path: &Path) -> Result<Vec<(VehicleState, f64)>, ScenarioError> {
        let placed: Vec<(VehicleState, f64)> = if let Some(poses) = &self.start.poses {
            poses
                .iter()
                .map(|p| {
                    let st = VehicleState::new(p[0], p[1], p[2], p[3]);
                    (st, path.project(&nalgebra::Point2::new(p[0], p[1])))
                })
                .collect()
        } else {
            let st = &self.start;
            let gap = st.gap.unwrap_or_else(|| self.convoy_config().steady_gap());
            let column = gap * (self.agent_count - 1) as f64;
            let s0 = st.s0.unwrap_or(if path.is_closed() { 0.0 } else { column + st.scatter_along + 1.0 });
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let mut draw = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
            let mut out = Vec::with_capacity(self.agent_count);
            for i in 0..self.agent_count {
                let s = s0 - gap * i as f64 + draw(st.scatter_along);
                if !path.is_closed() && !(0.0..=path.length()).contains(&s) {
                    return Err(invalid(format!("agent {} would start off the route (s = {s:.2})", i + 1)));
                }
                let pose = path.pose_at(s);
                let lateral = draw(st.scatter_lateral);
                let heading = pose.heading + draw(st.scatter_heading);
                let state =
                    VehicleState::new(pose.x - lateral * pose.heading.sin(), pose.y + lateral * pose.heading.cos(), heading, st.speed);
                out.push((state, path.normalize_s(s)));
            }
            out
        };
        let states: Vec<VehicleState> = placed.iter().map(|p| p.0).collect();
        for i in 0..states.len() {
            if !states[i].is_finite() {
                return Err(invalid(format!("agent {} has a non-finite start pose", i + 1)));
            }
            for j in 0..i {
                if states[i].distance_to(&states[j]) < self.collision_radius {
                    return Err(invalid(format!("agents {} and {} start in collision", j + 1, i + 1)));
                }
            }
        }
        Ok(placed)
    }

    /// Along-path progress the column can nominally make: cruising at `v_t`
    /// after accelerating from the start speed, bounded by the end of an
    /// open route behind the tail.
    pub fn nominal_progress(&self, path: &Path, tail_start_s: f64) -> f64 {
        let v0 = self.start.speed.min(self.v_t);
        let ramp = (self.v_t - v0) / self.vehicle.a_max;
        let dist = if ramp >= self.duration {
            v0 * self.duration + 0.5 * self.vehicle.a_max * self.duration.powi(2)
        } else {
            self.v_t * self.duration - 0.5 * (self.v_t - v0) * ramp
        };
        if path.is_closed() {
            dist
        } else {
            dist.min(path.length() - tail_start_s)
        }
    }
}
