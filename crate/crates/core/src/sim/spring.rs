//! Three masses in a column joined by spring-damper links, used to compare
//! lead-only coupling with coupling to both neighbors when the last vehicle
//! gets stuck.
//!
//! Positions are measured in a frame cruising with the column at `v0`, so
//! the undisturbed column sits at rest with every gap error at zero.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Each mass feels only the link to the mass ahead.
    LeadOnly,
    /// Link forces act on both ends.
    BothNeighbors,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Disturbance {
    None,
    /// The last mass stops dead for `hold` seconds while the column cruises
    /// at `v0`, then is released.
    StuckTail {
        hold: f64,
        v0: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpringSettings {
    pub dt: f64,
    pub horizon: f64,
    /// Settling band as a share of the disturbance size.
    pub band: f64,
    /// Decimation of the returned trace (s).
    pub trace_every: f64,
}

impl Default for SpringSettings {
    fn default() -> Self {
        Self { dt: 1e-3, horizon: 120.0, band: 0.05, trace_every: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpringOutcome {
    pub coupling: Coupling,
    /// Settling time of the gap behind agent 2 and agent 3 (s).
    pub gap_settling: [f64; 2],
    /// The later of the two.
    pub settling: f64,
    pub peak_error: f64,
    /// `(t, e12, e23)` samples.
    pub trace: Vec<[f64; 3]>,
}

type State = [f64; 6];

fn accel(x: &State, coupling: Coupling, k: f64, c: f64, m: f64, held: bool) -> [f64; 3] {
    let mut f = [0.0; 3];
    for j in 0..2 {
        // gap error of link j (mass j ahead of mass j+1) and its rate
        let e = x[j] - x[j + 1];
        let de = x[3 + j] - x[3 + j + 1];
        let pull = k * e + c * de;
        f[j + 1] += pull;
        if coupling == Coupling::BothNeighbors {
            f[j] -= pull;
        }
    }
    if held {
        f[2] = 0.0;
    }
    [f[0] / m, f[1] / m, f[2] / m]
}

fn deriv(x: &State, coupling: Coupling, k: f64, c: f64, m: f64, held: bool) -> State {
    let a = accel(x, coupling, k, c, m, held);
    [x[3], x[4], x[5], a[0], a[1], a[2]]
}

fn rk4(x: &State, h: f64, f: impl Fn(&State) -> State) -> State {
    let add = |a: &State, b: &State, s: f64| -> State { std::array::from_fn(|i| a[i] + s * b[i]) };
    let k1 = f(x);
    let k2 = f(&add(x, &k1, 0.5 * h));
    let k3 = f(&add(x, &k2, 0.5 * h));
    let k4 = f(&add(x, &k3, h));
    std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Time after which `|e|` stays at or below `band`; 0 if it never leaves.
pub fn settling_time(times: &[f64], errors: &[f64], band: f64) -> f64 {
    match errors.iter().rposition(|e| e.abs() > band) {
        None => 0.0,
        Some(k) => times.get(k + 1).copied().unwrap_or(f64::INFINITY),
    }
}

/// Simulates the three-mass column and reports gap settling times.
pub fn spring_demo(coupling: Coupling, k: f64, c: f64, m: f64, disturbance: Disturbance, settings: &SpringSettings) -> SpringOutcome {
    assert!(k > 0.0 && c > 0.0 && m > 0.0, "spring, damper and mass must be positive");
    let (hold, v0) = match disturbance {
        Disturbance::None => (0.0, 0.0),
        Disturbance::StuckTail { hold, v0 } => (hold, v0),
    };
    let size = (hold * v0).max(f64::MIN_POSITIVE);
    let band = settings.band * size;
    let steps = (settings.horizon / settings.dt).round() as usize;
    let every = ((settings.trace_every / settings.dt).round() as usize).max(1);

    let mut x: State = [0.0; 6];
    let mut times = Vec::with_capacity(steps + 1);
    let mut e12 = Vec::with_capacity(steps + 1);
    let mut e23 = Vec::with_capacity(steps + 1);
    let mut trace = Vec::new();
    for step in 0..=steps {
        let t = step as f64 * settings.dt;
        times.push(t);
        e12.push(x[0] - x[1]);
        e23.push(x[1] - x[2]);
        if step % every == 0 {
            trace.push([t, x[0] - x[1], x[1] - x[2]]);
        }
        if step == steps {
            break;
        }
        let held = t + 1e-12 < hold;
        if held {
            // stopped in the world, so drifting back at v0 in the column frame
            x[5] = -v0;
        }
        x = rk4(&x, settings.dt, |s| deriv(s, coupling, k, c, m, held));
        if held {
            x[2] = -v0 * (t + settings.dt).min(hold);
        }
    }
    let gap_settling = [settling_time(&times, &e12, band), settling_time(&times, &e23, band)];
    let peak_error = e12.iter().chain(&e23).fold(0.0f64, |a, e| a.max(e.abs()));
    SpringOutcome { coupling, gap_settling, settling: gap_settling[0].max(gap_settling[1]), peak_error, trace }
}

/// A single mass on a spring-damper released from `x0` at rest; the
/// settling band is `band` times `x0`.
pub fn single_mass_settling(k: f64, c: f64, m: f64, x0: f64, settings: &SpringSettings) -> f64 {
    let steps = (settings.horizon / settings.dt).round() as usize;
    let mut x = [x0, 0.0];
    let mut times = Vec::with_capacity(steps + 1);
    let mut xs = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        times.push(step as f64 * settings.dt);
        xs.push(x[0]);
        let f = |s: &[f64; 2]| [s[1], (-k * s[0] - c * s[1]) / m];
        let h = settings.dt;
        let add = |a: &[f64; 2], b: &[f64; 2], s: f64| [a[0] + s * b[0], a[1] + s * b[1]];
        let k1 = f(&x);
        let k2 = f(&add(&x, &k1, 0.5 * h));
        let k3 = f(&add(&x, &k2, 0.5 * h));
        let k4 = f(&add(&x, &k3, h));
        x = [x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]), x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])];
    }
    settling_time(&times, &xs, settings.band * x0.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quiet_column_is_settled() {
        for coupling in [Coupling::LeadOnly, Coupling::BothNeighbors] {
            let out = spring_demo(coupling, 1.0, 1.0, 1.0, Disturbance::None, &SpringSettings::default());
            assert_eq!(out.gap_settling, [0.0, 0.0]);
            assert_eq!(out.peak_error, 0.0);
        }
    }

    #[test]
    fn lead_only_never_disturbs_the_front() {
        let d = Disturbance::StuckTail { hold: 4.0, v0: 1.0 };
        let out = spring_demo(Coupling::LeadOnly, 2.0, 1.0, 1.0, d, &SpringSettings::default());
        assert_eq!(out.gap_settling[0], 0.0);
        assert!(out.peak_error >= 4.0 - 1e-9);
    }

    #[test]
    fn both_neighbors_settles_first() {
        let d = Disturbance::StuckTail { hold: 4.0, v0: 1.0 };
        for (k, c) in [(1.0, 0.5), (2.0, 1.0), (4.0, 2.0)] {
            let a = spring_demo(Coupling::LeadOnly, k, c, 1.0, d, &SpringSettings::default());
            let b = spring_demo(Coupling::BothNeighbors, k, c, 1.0, d, &SpringSettings::default());
            assert!(b.settling < a.settling, "k={k} c={c}: {} vs {}", b.settling, a.settling);
            assert!(b.peak_error < a.peak_error);
        }
    }

    #[test]
    fn single_mass_matches_envelope() {
        // lightly damped, so the envelope crossing is within half a period
        let (k, c, m) = (1.0f64, 0.04, 1.0);
        let wn = (k / m).sqrt();
        let zeta = c / (2.0 * (k * m).sqrt());
        let envelope = -(0.05 * (1.0 - zeta * zeta).sqrt()).ln() / (zeta * wn);
        let sim = single_mass_settling(k, c, m, 1.0, &SpringSettings { horizon: 300.0, ..SpringSettings::default() });
        assert!((sim - envelope).abs() / envelope < 0.05, "{sim} vs {envelope}");
    }
}
