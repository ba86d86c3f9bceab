//! Deterministic lockstep world.
//!
//! Each tick: agents broadcast and the bus delivers what is due; every
//! controller sees its own state plus the latest delivered neighbor
//! snapshots; scenario events override or limit the result; all vehicles
//! are stepped with the same `dt`; the tick is logged. A collision stops the
//! run with a verdict rather than an error.

mod bus;
mod scenario;
pub mod spring;

pub use bus::{Delivery, MessageBus};
pub use scenario::{BusConfig, ControllerKind, CorridorSpec, Event, MapSpec, PathSpec, Scenario, ScenarioError, StartSpec};

use crate::agent::{AgentOutput, Controller, Environment, Observation};
use crate::base::BaseAgent;
use crate::convoy::{ConvoyAgent, ConvoyError};
use crate::dynamics::{self, ControlInput, DynamicsError, VehicleParams, VehicleState};
use crate::geometry::{OccupancyMap, Path};
use crate::metrics::{self, CollisionVerdict, MetricSample, RunSummary, SummaryContext};
use nalgebra::Point2;
use rayon::prelude::*;
use serde::Serialize;
use std::io::Write;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("agent {agent} controller failed at t = {time:.3}: {source}")]
    Controller {
        agent: usize,
        time: f64,
        #[source]
        source: ConvoyError,
    },
    #[error("agent {agent} could not be stepped at t = {time:.3}: {source}")]
    Dynamics {
        agent: usize,
        time: f64,
        #[source]
        source: DynamicsError,
    },
    #[error("{0} controllers supplied for {1} agents")]
    ControllerCount(usize, usize),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Share of the desired gap used as the settling band in summaries.
pub const SETTLE_BAND: f64 = 0.2;

/// One agent at one tick: the state the controller saw and the control
/// that was applied over the following `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickLog {
    pub tick: usize,
    pub time: f64,
    /// 1-based, head first.
    pub agent: usize,
    pub state: VehicleState,
    pub control: ControlInput,
    pub fallback: bool,
    /// Arc length of the agent's projection onto the route.
    pub s: f64,
    /// Along-path distance covered since the start.
    pub progress: f64,
    pub euclid_to_lead: Option<f64>,
    pub euclid_to_follow: Option<f64>,
    pub dist_to_lead: Option<f64>,
    pub dist_to_follow: Option<f64>,
    pub e_m1: Option<f64>,
    pub e_m2: Option<f64>,
    pub w_lead: Option<f64>,
    pub w_follow: Option<f64>,
}

#[derive(Serialize)]
struct CsvRow {
    tick: usize,
    time: f64,
    agent: usize,
    x: f64,
    y: f64,
    psi: f64,
    v: f64,
    a: f64,
    delta: f64,
    fallback: u8,
    dist_to_lead: Option<f64>,
    dist_to_follow: Option<f64>,
    e_m1: Option<f64>,
    e_m2: Option<f64>,
    w_lead: Option<f64>,
    w_follow: Option<f64>,
}

impl From<&TickLog> for CsvRow {
    fn from(l: &TickLog) -> Self {
        CsvRow {
            tick: l.tick,
            time: l.time,
            agent: l.agent,
            x: l.state.x,
            y: l.state.y,
            psi: l.state.psi,
            v: l.state.v,
            a: l.control.a,
            delta: l.control.delta,
            fallback: l.fallback as u8,
            dist_to_lead: l.dist_to_lead,
            dist_to_follow: l.dist_to_follow,
            e_m1: l.e_m1,
            e_m2: l.e_m2,
            w_lead: l.w_lead,
            w_follow: l.w_follow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Solve the agents of a tick on the rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub logs: Vec<TickLog>,
    pub collision: Option<CollisionVerdict>,
    pub summary: RunSummary,
    /// Wall-clock seconds per controller call, per agent (head first).
    pub solve_times: Vec<Vec<f64>>,
}

impl RunOutput {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        for l in &self.logs {
            w.serialize(CsvRow::from(l))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary is always serializable")
    }

    /// Logs of one agent in tick order.
    pub fn agent_logs(&self, agent: usize) -> impl Iterator<Item = &TickLog> {
        self.logs.iter().filter(move |l| l.agent == agent)
    }

    pub fn metric_samples(&self) -> Vec<MetricSample> {
        self.logs
            .iter()
            .map(|l| MetricSample {
                tick: l.tick,
                time: l.time,
                agent: l.agent,
                e_m1: l.e_m1,
                e_m2: l.e_m2,
                progress: l.progress,
                fallback: l.fallback,
            })
            .collect()
    }
}

/// Route, obstacle map and start line-up of a scenario.
#[derive(Debug, Clone)]
pub struct World {
    pub path: Path,
    pub map: Option<OccupancyMap>,
    pub initial: Vec<VehicleState>,
    /// Arc length of each starting position.
    pub initial_s: Vec<f64>,
}

impl World {
    pub fn build(scn: &Scenario) -> Result<Self, ScenarioError> {
        scn.validate()?;
        let path = scn.path.build()?;
        let map = scn.map.as_ref().map(|m| m.build(&path)).transpose()?;
        let (initial, initial_s) = scn.line_up(&path)?.into_iter().unzip();
        Ok(Self { path, map, initial, initial_s })
    }
}

/// The controllers a scenario asks for, head first.
pub fn build_controllers(scn: &Scenario) -> Result<Vec<Box<dyn Controller>>, ScenarioError> {
    let bad = |e: ConvoyError| ScenarioError::Invalid(e.to_string());
    (0..scn.agent_count)
        .map(|_| -> Result<Box<dyn Controller>, ScenarioError> {
            Ok(match scn.controller {
                ControllerKind::Convoy => Box::new(ConvoyAgent::new(scn.convoy_config(), scn.vehicle).map_err(bad)?),
                ControllerKind::Base => Box::new(BaseAgent::new(scn.base_config(), scn.convoy_config(), scn.vehicle).map_err(bad)?),
            })
        })
        .collect()
}

pub fn run(scn: &Scenario) -> Result<RunOutput, SimError> {
    run_with(scn, build_controllers(scn)?, RunOptions::default())
}

/// Runs a scenario with caller-supplied controllers (head first).
pub fn run_with(scn: &Scenario, mut controllers: Vec<Box<dyn Controller>>, opts: RunOptions) -> Result<RunOutput, SimError> {
    let world = World::build(scn)?;
    let n = scn.agent_count;
    if controllers.len() != n {
        return Err(SimError::ControllerCount(controllers.len(), n));
    }
    let env = Environment { path: &world.path, map: world.map.as_ref() };
    let path = &world.path;
    let d_desired = scn.desired_gap();
    let ticks = (scn.duration / scn.dt).round() as usize;

    let mut states = world.initial.clone();
    // metrics use projections throughout, so re-project the placed poses
    // (lateral scatter on a bend shifts them slightly) near their slots
    let mut s: Vec<f64> =
        world.initial.iter().zip(&world.initial_s).map(|(st, &slot)| path.project_near(&Point2::new(st.x, st.y), slot, 5.0)).collect();
    let tail_start = s[n - 1];
    let mut progress = vec![0.0; n];
    let mut bus = MessageBus::new(scn.bus, n, scn.seed);
    let mut logs = Vec::with_capacity(ticks * n);
    let mut solve_times = vec![Vec::with_capacity(ticks); n];
    let mut collision = None;

    for tick in 0..ticks {
        let time = tick as f64 * scn.dt;
        bus.broadcast(time, &states);
        bus.deliver(time);
        let obs: Vec<Observation> =
            (0..n).map(|i| Observation { time, own: states[i], lead: bus.lead_of(i), follow: bus.follow_of(i) }).collect();

        let timed = |c: &mut Box<dyn Controller>, o: &Observation| {
            let t0 = Instant::now();
            let r = c.act(o, &env);
            (r, t0.elapsed().as_secs_f64())
        };
        let results: Vec<(Result<AgentOutput, ConvoyError>, f64)> = if opts.parallel {
            controllers.par_iter_mut().zip(obs.par_iter()).map(|(c, o)| timed(c, o)).collect()
        } else {
            controllers.iter_mut().zip(&obs).map(|(c, o)| timed(c, o)).collect()
        };
        let mut outputs = Vec::with_capacity(n);
        for (i, (r, secs)) in results.into_iter().enumerate() {
            solve_times[i].push(secs);
            outputs.push(r.map_err(|source| SimError::Controller { agent: i + 1, time, source })?);
        }

        let params: Vec<VehicleParams> = (0..n).map(|i| agent_params(scn, i + 1, time)).collect();
        let controls: Vec<ControlInput> = (0..n)
            .map(|i| {
                let mut u = outputs[i].control.clamped(&scn.vehicle);
                if stalled(scn, i + 1, time) {
                    u.a = -scn.vehicle.a_max;
                }
                u
            })
            .collect();

        let gaps: Vec<f64> = (1..n).map(|i| path.s_diff(s[i - 1], s[i])).collect();
        for i in 0..n {
            let agent = i + 1;
            let e_m1 = metrics::e_m1(&gaps, agent).ok();
            let e_m2 = (i > 0).then(|| metrics::e_m2(gaps[i - 1], d_desired));
            logs.push(TickLog {
                tick,
                time,
                agent,
                state: states[i],
                control: controls[i],
                fallback: outputs[i].fallback,
                s: s[i],
                progress: progress[i],
                euclid_to_lead: (i > 0).then(|| states[i].distance_to(&states[i - 1])),
                euclid_to_follow: (i + 1 < n).then(|| states[i].distance_to(&states[i + 1])),
                dist_to_lead: (i > 0).then(|| gaps[i - 1]),
                dist_to_follow: (i + 1 < n).then(|| gaps[i]),
                e_m1,
                e_m2,
                w_lead: outputs[i].w_lead,
                w_follow: outputs[i].w_follow,
            });
        }

        for i in 0..n {
            states[i] = dynamics::step(&states[i], &controls[i], scn.dt, &params[i]).map_err(|source| SimError::Dynamics {
                agent: i + 1,
                time,
                source,
            })?;
            let window = 5.0 + 2.0 * states[i].v.abs() * scn.dt;
            let s_new = path.project_near(&Point2::new(states[i].x, states[i].y), s[i], window);
            progress[i] += path.s_diff(s_new, s[i]);
            s[i] = s_new;
        }

        if let Some(v) = first_collision(&states, scn.collision_radius, time + scn.dt) {
            collision = Some(v);
            break;
        }
    }

    let ctx = SummaryContext {
        scenario: scn.name.clone(),
        controller: scn.controller.to_string(),
        seed: scn.seed,
        agent_count: n,
        warmup: scn.warmup,
        d_desired,
        nominal_progress: scn.nominal_progress(path, tail_start),
        collision,
        settle_band: SETTLE_BAND,
    };
    let mut out = RunOutput { logs, collision, summary: metrics::summarize(&[], &ctx), solve_times };
    out.summary = metrics::summarize(&out.metric_samples(), &ctx);
    Ok(out)
}

/// Vehicle limits of `agent` at `time`, with any active speed cap applied.
pub fn agent_params(scn: &Scenario, agent: usize, time: f64) -> VehicleParams {
    let mut p = scn.vehicle;
    for ev in &scn.events {
        if let Event::SpeedCap { agent: a, v_cap, t_start } = *ev {
            if a == agent && time + 1e-9 >= t_start {
                p.v_max = p.v_max.min(v_cap);
            }
        }
    }
    p
}

/// Whether a stall event holds `agent` at `time`.
pub fn stalled(scn: &Scenario, agent: usize, time: f64) -> bool {
    scn.events.iter().any(|ev| match *ev {
        Event::Stall { agent: a, t_start, duration } => a == agent && time + 1e-9 >= t_start && time + 1e-9 < t_start + duration,
        _ => false,
    })
}

fn first_collision(states: &[VehicleState], radius: f64, time: f64) -> Option<CollisionVerdict> {
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let d = states[i].distance_to(&states[j]);
            if d < radius {
                return Some(CollisionVerdict { time, agents: (i + 1, j + 1), distance: d });
            }
        }
    }
    None
}
