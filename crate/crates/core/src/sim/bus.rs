//! Neighbor-to-neighbor message bus: rate-limited sends, fixed latency and
//! seeded random drops. Each agent only ever talks to the agents directly
//! ahead of and behind it.

use super::scenario::BusConfig;
use crate::agent::NeighborSnapshot;
use crate::dynamics::VehicleState;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Slack for comparing tick times against schedule times.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub to: usize,
    pub snapshot: NeighborSnapshot,
    pub delivered_at: f64,
}

#[derive(Debug, Clone)]
struct InFlight {
    to: usize,
    snapshot: NeighborSnapshot,
    due: f64,
}

/// Agents are indexed from 0 (head) here; `agent_id` in snapshots is the
/// 1-based number used in logs.
#[derive(Debug, Clone)]
pub struct MessageBus {
    cfg: BusConfig,
    rng: ChaCha8Rng,
    sends: Vec<u64>,
    queue: VecDeque<InFlight>,
    lead_inbox: Vec<Option<NeighborSnapshot>>,
    follow_inbox: Vec<Option<NeighborSnapshot>>,
}

impl MessageBus {
    pub fn new(cfg: BusConfig, agents: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // separate stream from the start-pose scatter
        rng.set_stream(1);
        Self { cfg, rng, sends: vec![0; agents], queue: VecDeque::new(), lead_inbox: vec![None; agents], follow_inbox: vec![None; agents] }
    }

    /// Each agent whose next send slot has come broadcasts its state to
    /// both neighbors. A drop is drawn per link and message.
    pub fn broadcast(&mut self, now: f64, states: &[VehicleState]) {
        let n = states.len();
        let period = 1.0 / self.cfg.rate;
        for (i, state) in states.iter().enumerate() {
            if (self.sends[i] as f64) * period > now + TIME_EPS {
                continue;
            }
            // skip missed slots rather than bursting
            self.sends[i] = ((now + TIME_EPS) / period).floor() as u64 + 1;
            let snapshot = NeighborSnapshot { agent_id: i + 1, state: *state, timestamp: now };
            let targets = [i.checked_sub(1), (i + 1 < n).then_some(i + 1)];
            for to in targets.into_iter().flatten() {
                let dropped = self.rng.random::<f64>() < self.cfg.drop_prob;
                if !dropped {
                    self.queue.push_back(InFlight { to, snapshot, due: now + self.cfg.latency });
                }
            }
        }
    }

    /// Hands over every message whose delivery time has come, keeping the
    /// newest snapshot per neighbor.
    pub fn deliver(&mut self, now: f64) -> Vec<Delivery> {
        let mut out = Vec::new();
        let mut pending = VecDeque::with_capacity(self.queue.len());
        while let Some(m) = self.queue.pop_front() {
            if m.due <= now + TIME_EPS {
                let from = m.snapshot.agent_id - 1;
                let slot = if from < m.to { &mut self.lead_inbox[m.to] } else { &mut self.follow_inbox[m.to] };
                if slot.is_none_or(|s| s.timestamp <= m.snapshot.timestamp) {
                    *slot = Some(m.snapshot);
                }
                out.push(Delivery { to: m.to, snapshot: m.snapshot, delivered_at: now });
            } else {
                pending.push_back(m);
            }
        }
        self.queue = pending;
        out
    }

    pub fn lead_of(&self, agent: usize) -> Option<NeighborSnapshot> {
        self.lead_inbox[agent]
    }

    pub fn follow_of(&self, agent: usize) -> Option<NeighborSnapshot> {
        self.follow_inbox[agent]
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}
