//! Convoy error metrics and run summaries.
//!
//! Gaps are along-path distances. `gaps[j]` is the gap between agents
//! `j + 1` and `j + 2` (1-based agent numbers, head first), so a column of
//! `L` agents has `L - 1` gaps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("the head of the column has no metric")]
    Leader,
    #[error("agent {agent} is outside a column of {len}")]
    OutOfRange { agent: usize, len: usize },
    #[error("midpoint error needs at least three agents")]
    TooFewAgents,
}

/// Midpoint error of agent `i`: how far it sits from halfway between its
/// neighbors. The tail uses the two gaps ahead of it.
pub fn e_m1(gaps: &[f64], i: usize) -> Result<f64, MetricsError> {
    let len = gaps.len() + 1;
    if i == 1 {
        return Err(MetricsError::Leader);
    }
    if i == 0 || i > len {
        return Err(MetricsError::OutOfRange { agent: i, len });
    }
    if len < 3 {
        return Err(MetricsError::TooFewAgents);
    }
    // d(a, b) for a ahead of b
    let d = |a: usize, b: usize| gaps[a - 1..b - 1].iter().sum::<f64>();
    Ok(if i < len { (d(i - 1, i + 1) / 2.0 - d(i - 1, i)).abs() } else { (d(len - 2, len) / 2.0 - d(len - 1, len)).abs() })
}

/// Deviation of the gap to the agent ahead from the desired gap.
pub fn e_m2(d_prev: f64, d_desired: f64) -> f64 {
    (d_prev - d_desired).abs()
}

/// One agent's metrics at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub tick: usize,
    pub time: f64,
    pub agent: usize,
    pub e_m1: Option<f64>,
    pub e_m2: Option<f64>,
    /// Along-path distance covered since the start (m).
    pub progress: f64,
    pub fallback: bool,
}

/// Run-level facts [`summarize`] needs besides the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryContext {
    pub scenario: String,
    pub controller: String,
    pub seed: u64,
    pub agent_count: usize,
    pub warmup: f64,
    pub d_desired: f64,
    /// Progress the tail should make in a clean run (m).
    pub nominal_progress: f64,
    pub collision: Option<CollisionVerdict>,
    /// Band for the settling time, as a fraction of `d_desired`.
    pub settle_band: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionVerdict {
    pub time: f64,
    pub agents: (usize, usize),
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub controller: String,
    pub seed: u64,
    pub avg_e_m1: Option<f64>,
    pub avg_e_m2: Option<f64>,
    pub max_e_m2: Option<f64>,
    /// Mean gap error over agents 2..L at the last logged tick.
    pub final_e_m2: Option<f64>,
    pub collision: bool,
    pub collision_at: Option<CollisionVerdict>,
    /// Tail progress over nominal progress, in `[0, 1]`.
    pub completion: f64,
    /// Time after which every gap error stays within the settle band; `None`
    /// if it never does.
    pub settling_time: Option<f64>,
    /// Per-agent settling times, agents 2..L.
    pub agent_settling: Vec<Option<f64>>,
    pub fallback_fraction: f64,
    pub samples: usize,
}

fn mean(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    // fixed summation order keeps the result independent of input order
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Time averages over agents 2..L after the warm-up window.
pub fn summarize(samples: &[MetricSample], ctx: &SummaryContext) -> RunSummary {
    let scored: Vec<&MetricSample> = samples.iter().filter(|s| s.agent >= 2 && s.time >= ctx.warmup - 1e-9).collect();
    let avg_e_m1 = mean(scored.iter().filter_map(|s| s.e_m1).collect());
    let e2: Vec<f64> = scored.iter().filter_map(|s| s.e_m2).collect();
    let max_e_m2 = e2.iter().copied().reduce(f64::max);
    let avg_e_m2 = mean(e2);

    let last_tick = samples.iter().map(|s| s.tick).max();
    let final_e_m2 = last_tick.and_then(|t| mean(samples.iter().filter(|s| s.tick == t && s.agent >= 2).filter_map(|s| s.e_m2).collect()));

    let band = ctx.settle_band * ctx.d_desired;
    let agent_settling: Vec<Option<f64>> = (2..=ctx.agent_count)
        .map(|a| {
            let mut series: Vec<&MetricSample> = samples.iter().filter(|s| s.agent == a && s.e_m2.is_some()).collect();
            series.sort_by_key(|s| s.tick);
            settling_time(&series, band)
        })
        .collect();
    let settling_time = if agent_settling.is_empty() || agent_settling.iter().any(Option::is_none) {
        None
    } else {
        agent_settling.iter().flatten().copied().reduce(f64::max)
    };

    let tail = samples.iter().filter(|s| s.agent == ctx.agent_count).max_by_key(|s| s.tick);
    let completion = match (tail, ctx.nominal_progress > 0.0) {
        (Some(t), true) => (t.progress / ctx.nominal_progress).clamp(0.0, 1.0),
        _ => 0.0,
    };
    let fallback_fraction =
        if samples.is_empty() { 0.0 } else { samples.iter().filter(|s| s.fallback).count() as f64 / samples.len() as f64 };
    RunSummary {
        scenario: ctx.scenario.clone(),
        controller: ctx.controller.clone(),
        seed: ctx.seed,
        avg_e_m1,
        avg_e_m2,
        max_e_m2,
        final_e_m2,
        collision: ctx.collision.is_some(),
        collision_at: ctx.collision,
        completion,
        settling_time,
        agent_settling,
        fallback_fraction,
        samples: scored.len(),
    }
}

/// First time after which the series stays within `band`.
fn settling_time(series: &[&MetricSample], band: f64) -> Option<f64> {
    let last_out = series.iter().rposition(|s| s.e_m2.unwrap() > band);
    match last_out {
        None => series.first().map(|s| s.time),
        Some(k) if k + 1 < series.len() => Some(series[k + 1].time),
        Some(_) => None,
    }
}
