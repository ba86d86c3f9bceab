//! What a controller sees each tick and what it returns.
//!
//! Controllers are handed an [`Observation`] built by the simulator from
//! the agent's own state and the neighbor snapshots the bus has delivered.
//! Nothing else about the world is reachable from here.

use crate::dynamics::{ControlInput, VehicleState};
use crate::geometry::{OccupancyMap, Path};
use serde::{Deserialize, Serialize};

/// A neighbor's state as broadcast at `timestamp`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborSnapshot {
    pub agent_id: usize,
    pub state: VehicleState,
    pub timestamp: f64,
}

/// Everything one agent knows at one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub own: VehicleState,
    pub lead: Option<NeighborSnapshot>,
    pub follow: Option<NeighborSnapshot>,
}

/// Static shared context: the reference path and, if any, the obstacle map.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub path: &'a Path,
    pub map: Option<&'a OccupancyMap>,
}

/// One tick's control plus diagnostics for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentOutput {
    pub control: ControlInput,
    pub fallback: bool,
    pub w_lead: Option<f64>,
    pub w_follow: Option<f64>,
    /// Whether an optimization was actually run this tick.
    pub solved: bool,
}

/// A per-agent decentralized controller.
pub trait Controller: Send {
    fn act(&mut self, obs: &Observation, env: &Environment<'_>) -> Result<AgentOutput, crate::convoy::ConvoyError>;
}
