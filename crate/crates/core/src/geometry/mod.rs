//! Reference paths, path generators and occupancy maps.

mod occupancy;
mod path;
mod spline;

pub use occupancy::{path_clear, OccupancyMap};
pub use path::{build_closed_path, build_path, Path, PathPose, DEFAULT_DS};

use nalgebra::Point2;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("a path needs at least two distinct points, got {0}")]
    TooFewPoints(usize),
    #[error("point {0} duplicates its predecessor")]
    DuplicatePoint(usize),
    #[error("sample spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("invalid map: {0}")]
    BadMap(String),
}

/// Chains straight lines and circular arcs into a densely sampled path.
#[derive(Debug, Clone)]
pub struct PathBuilder {
    points: Vec<Point2<f64>>,
    heading: f64,
    ds: f64,
}

impl PathBuilder {
    pub fn new(x: f64, y: f64, heading: f64, ds: f64) -> Self {
        Self { points: vec![Point2::new(x, y)], heading, ds }
    }

    fn last(&self) -> Point2<f64> {
        *self.points.last().unwrap()
    }

    pub fn line(mut self, length: f64) -> Self {
        let start = self.last();
        let n = (length / self.ds).round().max(1.0) as usize;
        let dir = nalgebra::Vector2::new(self.heading.cos(), self.heading.sin());
        for i in 1..=n {
            self.points.push(start + dir * (length * i as f64 / n as f64));
        }
        self
    }

    /// Arc of `radius` sweeping `angle` radians; positive turns left.
    pub fn arc(mut self, radius: f64, angle: f64) -> Self {
        let start = self.last();
        let side = angle.signum();
        let normal = self.heading + side * PI / 2.0;
        let center = start + nalgebra::Vector2::new(normal.cos(), normal.sin()) * radius;
        let phi0 = (start.y - center.y).atan2(start.x - center.x);
        let n = (radius * angle.abs() / self.ds).round().max(1.0) as usize;
        for i in 1..=n {
            let phi = phi0 + angle * i as f64 / n as f64;
            self.points.push(center + nalgebra::Vector2::new(phi.cos(), phi.sin()) * radius);
        }
        self.heading += angle;
        self
    }

    pub fn build(self) -> Result<Path, GeometryError> {
        Path::from_points(self.points, false)
    }

    /// Closes the loop; the final point must land back on the first.
    pub fn build_closed(mut self) -> Result<Path, GeometryError> {
        let first = self.points[0];
        if (self.last() - first).norm() < 0.5 * self.ds {
            self.points.pop();
        }
        Path::from_points(self.points, true)
    }
}

/// Straight segment along +x.
pub fn straight(length: f64, ds: f64) -> Result<Path, GeometryError> {
    build_path(&[[0.0, 0.0], [length, 0.0]], ds)
}

/// Gentle sinusoid along +x.
pub fn low_curvature(length: f64, amplitude: f64, wavelength: f64, ds: f64) -> Result<Path, GeometryError> {
    let n = (length / 2.0).ceil().max(2.0) as usize;
    let wps: Vec<[f64; 2]> = (0..=n)
        .map(|i| {
            let x = length * i as f64 / n as f64;
            [x, amplitude * (2.0 * PI * x / wavelength).sin()]
        })
        .collect();
    build_path(&wps, ds)
}

/// Figure-eight of two circles of `radius` touching at the origin; both
/// lobes pass the origin heading +y. Closed, length `4 pi radius`.
pub fn infinity_loop(radius: f64, ds: f64) -> Result<Path, GeometryError> {
    PathBuilder::new(0.0, 0.0, PI / 2.0, ds).arc(radius, -2.0 * PI).arc(radius, 2.0 * PI).build_closed()
}

/// Serpentine of alternating right-angle turns.
pub fn tight_turns(radius: f64, leg: f64, turns: usize, ds: f64) -> Result<Path, GeometryError> {
    let mut b = PathBuilder::new(0.0, 0.0, 0.0, ds).line(leg);
    for i in 0..turns {
        // left, right, right, left, ... keeps the course heading roughly +x
        let sign = if (i + 1) % 4 < 2 { 1.0 } else { -1.0 };
        b = b.arc(radius, sign * PI / 2.0).line(leg);
    }
    b.build()
}

/// Closed stadium loop with a chicane on the lower straight.
pub fn race_track(straight_len: f64, turn_radius: f64, chicane_radius: f64, ds: f64) -> Result<Path, GeometryError> {
    let q = PI / 4.0;
    let chicane = 4.0 * chicane_radius * q.sin();
    let rest = straight_len - chicane;
    if rest <= 0.0 {
        return Err(GeometryError::BadMap("chicane longer than the straight".into()));
    }
    PathBuilder::new(0.0, 0.0, 0.0, ds)
        .line(0.5 * rest)
        .arc(chicane_radius, q)
        .arc(chicane_radius, -q)
        .arc(chicane_radius, -q)
        .arc(chicane_radius, q)
        .line(0.5 * rest)
        .arc(turn_radius, PI)
        .line(straight_len)
        .arc(turn_radius, PI)
        .build_closed()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn infinity_loop_curvature_and_length() {
        let p = infinity_loop(20.0, DEFAULT_DS).unwrap();
        assert_abs_diff_eq!(p.length(), 80.0 * PI, epsilon = 1e-2);
        let kmax = p.curvatures().iter().fold(0.0f64, |m, k| m.max(k.abs()));
        assert!((kmax - 0.05).abs() / 0.05 < 0.05, "{kmax}");
        // both lobes leave the origin heading north
        let a = p.pose_at(0.0);
        let b = p.pose_at(0.5 * p.length());
        assert_abs_diff_eq!(a.heading, PI / 2.0, epsilon = 1e-2);
        assert_abs_diff_eq!(b.heading, PI / 2.0, epsilon = 1e-2);
        assert!(b.x.hypot(b.y) < 1e-6);
    }

    #[test]
    fn generators_produce_closed_loops_that_close() {
        let track = race_track(40.0, 10.0, 6.0, DEFAULT_DS).unwrap();
        assert!(track.is_closed());
        let pts = track.points();
        let gap = (pts[0] - pts[pts.len() - 1]).norm();
        assert!(gap < 1.5 * DEFAULT_DS, "{gap}");
        let turns = tight_turns(4.0, 8.0, 4, DEFAULT_DS).unwrap();
        let end = turns.pose_at(turns.length());
        assert_abs_diff_eq!(end.heading, 0.0, epsilon = 1e-6);
    }
}
