use convoy_core::agent::{AgentOutput, Controller, Environment, Observation};
use convoy_core::convoy::{ConvoyAgent, ConvoyError};
use convoy_core::dynamics::{self, VehicleState};
use convoy_core::metrics::summarize;
use convoy_core::sim::{self, BusConfig, Event, MessageBus, RunOptions, RunOutput, Scenario};
use nalgebra::Point2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::{Arc, Mutex};

fn scenario(name: &str) -> Scenario {
    let file = format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    Scenario::load(&file).unwrap_or_else(|e| panic!("{file}: {e}"))
}

fn states_of(out: &RunOutput, agent: usize) -> Vec<VehicleState> {
    out.agent_logs(agent).map(|l| l.state).collect()
}

#[test]
fn solo_agent_reaches_cruise_speed_and_holds_the_path() {
    let scn = Scenario { agent_count: 1, duration: 20.0, ..scenario("straight") };
    let out = sim::run(&scn).unwrap();
    let path = scn.path.build().unwrap();
    let logs: Vec<_> = out.agent_logs(1).collect();

    let reached = logs.iter().find(|l| (l.state.v - scn.v_t).abs() < 0.02 * scn.v_t).expect("never reached v_t");
    assert!(reached.time <= 10.0, "reached v_t only at {:.2} s", reached.time);

    for l in logs.iter().filter(|l| l.time >= 10.0) {
        let q = Point2::new(l.state.x, l.state.y);
        let p = path.pose_at(path.project(&q));
        let err = (q - Point2::new(p.x, p.y)).norm();
        assert!(err < 0.1, "path error {err:.3} m at {:.2} s", l.time);
    }
}

#[test]
fn head_stall_in_the_tunnel() {
    let (t_start, hold) = (10.0, 8.0);
    let base = scenario("tunnel_stall");
    let scn = Scenario { events: vec![Event::Stall { agent: 1, t_start, duration: hold }], ..base };
    let out = sim::run(&scn).unwrap();
    assert!(out.collision.is_none(), "collision: {:?}", out.collision);

    let speed_at = |agent: usize, t: f64| out.agent_logs(agent).find(|l| l.time >= t - 1e-9).unwrap().state.v;
    for agent in 2..=scn.agent_count {
        let before = speed_at(agent, t_start);
        let slowest =
            out.agent_logs(agent).filter(|l| l.time >= t_start && l.time < t_start + hold).map(|l| l.state.v).fold(f64::INFINITY, f64::min);
        assert!(slowest < before - 1.0, "agent {agent}: {before:.2} m/s before, {slowest:.2} m/s at slowest");
    }

    let settled = out.summary.settling_time.expect("gaps never returned to the band");
    assert!(settled > t_start + hold && settled < scn.duration, "settled at {settled:.2} s");
}

#[test]
fn dropping_every_message_decouples_the_agents() {
    let poses = vec![[20.0, 0.0, 0.0, 0.0], [13.0, 0.3, 0.02, 0.5], [5.0, -0.2, -0.03, 1.0]];
    let mut scn = scenario("straight");
    scn.duration = 8.0;
    scn.start.poses = Some(poses.clone());
    scn.bus = BusConfig { drop_prob: 1.0, ..scn.bus };
    let column = sim::run(&scn).unwrap();
    assert!(column.logs.iter().all(|l| l.w_lead.is_none() && l.w_follow.is_none()));

    for (i, pose) in poses.iter().enumerate() {
        let mut solo = scn.clone();
        solo.agent_count = 1;
        solo.start.poses = Some(vec![*pose]);
        let alone = sim::run(&solo).unwrap();
        assert_eq!(states_of(&column, i + 1), states_of(&alone, 1), "agent {}", i + 1);
    }
}

#[test]
fn runs_are_deterministic() {
    let scn = Scenario { duration: 15.0, ..scenario("low_curvature") };
    let a = sim::run(&scn).unwrap();
    let b = sim::run(&scn).unwrap();
    let par = sim::run_with(&scn, sim::build_controllers(&scn).unwrap(), RunOptions { parallel: true }).unwrap();
    assert_eq!(a.csv_bytes(), b.csv_bytes());
    assert_eq!(a.csv_bytes(), par.csv_bytes());
    assert_eq!(a.summary, par.summary);
}

#[test]
fn logged_states_follow_the_dynamics_exactly() {
    for (name, duration) in [("tunnel_stall", 25.0), ("race_track", 15.0), ("infinity_loop", 10.0)] {
        let scn = Scenario { duration, ..scenario(name) };
        let out = sim::run(&scn).unwrap();
        for agent in 1..=scn.agent_count {
            let logs: Vec<_> = out.agent_logs(agent).collect();
            for w in logs.windows(2) {
                let params = sim::agent_params(&scn, agent, w[0].time);
                let next = dynamics::step(&w[0].state, &w[0].control, scn.dt, &params).unwrap();
                assert_eq!(next, w[1].state, "{name}: agent {agent} at {:.2} s", w[0].time);
            }
        }
    }
}

/// Passes every call through to a convoy agent and keeps what it was shown.
struct Recorder {
    agent: usize,
    inner: ConvoyAgent,
    seen: Arc<Mutex<Vec<(usize, Observation)>>>,
}

impl Controller for Recorder {
    fn act(&mut self, obs: &Observation, env: &Environment<'_>) -> Result<AgentOutput, ConvoyError> {
        self.seen.lock().unwrap().push((self.agent, *obs));
        self.inner.act(obs, env)
    }
}

#[test]
fn controllers_only_see_delayed_snapshots() {
    let scn = Scenario { duration: 10.0, ..scenario("low_curvature") };
    let seen = Arc::new(Mutex::new(Vec::new()));
    let controllers: Vec<Box<dyn Controller>> = (1..=scn.agent_count)
        .map(|agent| {
            let inner = ConvoyAgent::new(scn.convoy_config(), scn.vehicle).unwrap();
            Box::new(Recorder { agent, inner, seen: Arc::clone(&seen) }) as Box<dyn Controller>
        })
        .collect();
    let out = sim::run_with(&scn, controllers, RunOptions::default()).unwrap();
    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), out.logs.len());

    let logged = |agent: usize, t: f64| out.agent_logs(agent).find(|l| (l.time - t).abs() < 1e-9).map(|l| l.state);
    let mut stale = 0;
    for (agent, obs) in seen.iter() {
        assert_eq!(Some(obs.own), logged(*agent, obs.time));
        let neighbors = [(obs.lead, agent.checked_sub(1)), (obs.follow, Some(agent + 1))];
        for (snap, expected_id) in neighbors {
            let Some(snap) = snap else { continue };
            assert_eq!(Some(snap.agent_id), expected_id);
            assert!(snap.timestamp <= obs.time - scn.bus.latency + 1e-9, "snapshot from {} seen at {}", snap.timestamp, obs.time);
            assert_eq!(Some(snap.state), logged(snap.agent_id, snap.timestamp), "snapshot is not a logged state");
            if Some(snap.state) != logged(snap.agent_id, obs.time) {
                stale += 1;
            }
        }
    }
    assert!(stale > 0, "snapshots never differed from live states");
}

#[test]
fn the_bus_never_delivers_early() {
    let configs = [
        BusConfig { rate: 20.0, latency: 0.05, drop_prob: 0.0 },
        BusConfig { rate: 7.0, latency: 0.13, drop_prob: 0.3 },
        BusConfig { rate: 50.0, latency: 0.0, drop_prob: 0.5 },
    ];
    for cfg in configs {
        let mut bus = MessageBus::new(cfg, 4, 9);
        let mut delivered = 0;
        for tick in 0..400 {
            let now = tick as f64 * 0.05;
            let states: Vec<VehicleState> = (0..4).map(|i| VehicleState::new(now - 6.0 * i as f64, 0.0, 0.0, 1.0)).collect();
            bus.broadcast(now, &states);
            for d in bus.deliver(now) {
                assert!(d.delivered_at + 1e-9 >= d.snapshot.timestamp + cfg.latency, "{cfg:?}: {d:?}");
                assert!(d.delivered_at <= now + 1e-9);
                delivered += 1;
            }
        }
        assert!(delivered > 0, "{cfg:?} delivered nothing");
    }
}

#[test]
fn logged_metrics_match_an_independent_recomputation() {
    let scn = Scenario { duration: 20.0, ..scenario("low_curvature") };
    let out = sim::run(&scn).unwrap();
    let path = scn.path.build().unwrap();
    let d_desired = scn.convoy.lambda1 * scn.v_t + scn.convoy.k_min;
    let n = scn.agent_count;
    let ticks = out.logs.len() / n;
    let mut checked = 0;
    for tick in 0..ticks {
        let row: Vec<_> = out.logs.iter().filter(|l| l.tick == tick).collect();
        let s: Vec<f64> = row.iter().map(|l| path.project(&Point2::new(l.state.x, l.state.y))).collect();
        // along-path distance from agent a back to agent b, 1-based
        let d = |a: usize, b: usize| s[a - 1] - s[b - 1];
        for l in &row {
            let i = l.agent;
            let want_m2 = (i > 1).then(|| (d(i - 1, i) - d_desired).abs());
            let want_m1 = match i {
                1 => None,
                _ if i < n => Some((d(i - 1, i + 1) / 2.0 - d(i - 1, i)).abs()),
                _ => Some((d(n - 2, n) / 2.0 - d(n - 1, n)).abs()),
            };
            for (got, want) in [(l.e_m1, want_m1), (l.e_m2, want_m2)] {
                match (got, want) {
                    (Some(g), Some(w)) => {
                        assert!((g - w).abs() < 1e-9, "tick {tick} agent {i}: {g} vs {w}");
                        checked += 1;
                    }
                    (None, None) => {}
                    other => panic!("tick {tick} agent {i}: {other:?}"),
                }
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn summaries_ignore_record_order_and_chunking() {
    let scn = Scenario { duration: 20.0, ..scenario("tight_turns") };
    let out = sim::run(&scn).unwrap();
    let samples = out.metric_samples();
    let reference = out.summary.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let world = sim::World::build(&scn).unwrap();
    let context = convoy_core::metrics::SummaryContext {
        scenario: scn.name.clone(),
        controller: scn.controller.to_string(),
        seed: scn.seed,
        agent_count: scn.agent_count,
        warmup: scn.warmup,
        d_desired: scn.desired_gap(),
        nominal_progress: scn.nominal_progress(&world.path, world.initial_s[scn.agent_count - 1]),
        collision: out.collision,
        settle_band: sim::SETTLE_BAND,
    };
    assert_eq!(summarize(&samples, &context), reference);

    for _ in 0..5 {
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(summarize(&shuffled, &context), reference);

        let mut chunks: Vec<Vec<_>> = samples.chunks(37).map(<[_]>::to_vec).collect();
        chunks.shuffle(&mut rng);
        let rejoined: Vec<_> = chunks.concat();
        assert_eq!(summarize(&rejoined, &context), reference);
    }
}
