//! Decentralized convoy control: an iLQR convoy controller with neighbor
//! prediction and distance-adaptive weighting, a leader-follower baseline,
//! and a deterministic lockstep multi-agent simulator.

pub mod agent;
pub mod base;
pub mod convoy;
pub mod dynamics;
pub mod geometry;
pub mod ilqr;
pub mod metrics;
pub mod planner;
pub mod quadform;
pub mod sim;
mod weights;
