use super::spline::CubicSpline;
use super::GeometryError;
use crate::dynamics::{angle_diff, wrap_angle};
use nalgebra::{Point2, Vector2};

/// Default resampling interval (m).
pub const DEFAULT_DS: f64 = 0.1;

/// Segments on each side of the hint scanned before the pruned sweep.
const SEED_SEGMENTS: i64 = 2;

/// Pose on a path: position and tangent heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Arc-length parameterized polyline.
///
/// Closed paths carry an implicit segment from the last sample back to the
/// first, and every arc-length query wraps modulo [`Path::length`].
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    points: Vec<Point2<f64>>,
    cumulative_s: Vec<f64>,
    headings: Vec<f64>,
    /// Unit direction and length of each segment, for cheap projection.
    segments: Vec<(Vector2<f64>, f64)>,
    max_segment: f64,
    length: f64,
    closed: bool,
    ds: f64,
}

impl Path {
    /// Builds a path directly from already-dense samples.
    pub fn from_points(points: Vec<Point2<f64>>, closed: bool) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        let mut cumulative_s = Vec::with_capacity(points.len());
        cumulative_s.push(0.0);
        for (i, w) in points.windows(2).enumerate() {
            let d = (w[1] - w[0]).norm();
            if d <= 0.0 {
                return Err(GeometryError::DuplicatePoint(i + 1));
            }
            cumulative_s.push(cumulative_s[i] + d);
        }
        let mut length = *cumulative_s.last().unwrap();
        if closed {
            let d = (points[0] - points[points.len() - 1]).norm();
            if d <= 0.0 {
                return Err(GeometryError::DuplicatePoint(points.len() - 1));
            }
            length += d;
        }
        let headings = finite_difference_headings(&points, closed);
        let count = points.len() - usize::from(!closed);
        let segments: Vec<(Vector2<f64>, f64)> = (0..count)
            .map(|i| {
                let ab = points[(i + 1) % points.len()] - points[i];
                let len = ab.norm();
                (ab / len, len)
            })
            .collect();
        let max_segment = segments.iter().map(|s| s.1).fold(0.0, f64::max);
        let ds = length / count as f64;
        Ok(Self { points, cumulative_s, headings, segments, max_segment, length, closed, ds })
    }

    pub fn points(&self) -> &[Point2<f64>] {
        &self.points
    }

    pub fn cumulative_s(&self) -> &[f64] {
        &self.cumulative_s
    }

    pub fn headings(&self) -> &[f64] {
        &self.headings
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Mean sample spacing.
    pub fn spacing(&self) -> f64 {
        self.ds
    }

    fn segment_count(&self) -> usize {
        if self.closed {
            self.points.len()
        } else {
            self.points.len() - 1
        }
    }

    /// Maps `s` into `[0, length)` on closed paths, `[0, length]` otherwise.
    pub fn normalize_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.length)
        } else {
            s.clamp(0.0, self.length)
        }
    }

    /// Signed along-path distance from `from` to `to`; wraps to the shorter
    /// way round on closed paths.
    pub fn s_diff(&self, to: f64, from: f64) -> f64 {
        let d = to - from;
        if self.closed {
            let half = 0.5 * self.length;
            let w = (d + half).rem_euclid(self.length) - half;
            if w == -half {
                half
            } else {
                w
            }
        } else {
            d
        }
    }

    fn closest_on_segment(&self, i: usize, q: &Point2<f64>) -> (f64, f64) {
        let (dir, len) = self.segments[i];
        let d = q - self.points[i];
        let t = d.dot(&dir).clamp(0.0, len);
        ((d - dir * t).norm_squared(), self.cumulative_s[i] + t)
    }

    /// Arc length of the closest point on the path; ties go to the smaller s.
    pub fn project(&self, q: &Point2<f64>) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..self.segment_count() {
            let (d2, s) = self.closest_on_segment(i, q);
            if strictly_closer(d2, best.0) {
                best = (d2, s);
            }
        }
        self.normalize_s(best.1)
    }

    /// Projection restricted to segments within `window` of `s_hint`.
    ///
    /// Keeps projections continuous where distant parts of a path come close
    /// (the crossing of a figure-eight, hairpins).
    pub fn project_near(&self, q: &Point2<f64>, s_hint: f64, window: f64) -> f64 {
        let segs = self.segment_count() as i64;
        if 2.0 * window >= self.length {
            return self.project(q);
        }
        let lo = ((s_hint - window) / self.ds).floor() as i64 - 1;
        let hi = ((s_hint + window) / self.ds).ceil() as i64 + 1;
        let index = |raw: i64| {
            if self.closed {
                Some(raw.rem_euclid(segs) as usize)
            } else {
                (0..segs).contains(&raw).then_some(raw as usize)
            }
        };
        // (squared distance, s, |s - hint| or NaN until a tie needs it)
        let mut best = (f64::INFINITY, 0.0, f64::NAN);
        let consider = |i: usize, best: &mut (f64, f64, f64)| {
            let (d2, s) = self.closest_on_segment(i, q);
            if strictly_closer(d2, best.0) {
                *best = (d2, s, f64::NAN);
            } else if !strictly_closer(best.0, d2) {
                // among equidistant candidates prefer the one nearest the hint
                let off = self.s_diff(s, s_hint).abs();
                if best.2.is_nan() {
                    best.2 = self.s_diff(best.1, s_hint).abs();
                }
                if off < best.2 {
                    *best = (d2, s, off);
                }
            }
        };
        // a close candidate first, so the sweeps over the rest of the
        // window can skip most segments
        let mid = (s_hint / self.ds).floor() as i64;
        let (seed_lo, seed_hi) = ((mid - SEED_SEGMENTS).max(lo), (mid + SEED_SEGMENTS).min(hi));
        for raw in seed_lo..=seed_hi {
            if let Some(i) = index(raw) {
                consider(i, &mut best);
            }
        }
        for (start, end) in [(lo, seed_lo - 1), (seed_hi + 1, hi)] {
            let mut raw = start;
            while raw <= end {
                let Some(i) = index(raw) else {
                    raw += 1;
                    continue;
                };
                consider(i, &mut best);
                // every point of segments i..=i+m lies within (m+1) max_segment
                // of segment i's start, so those segments are strictly farther
                // than the best so far while that reach stays short of the distance
                let margin = (q - self.points[i]).norm() - best.0.sqrt() * (1.0 + 1e-9) - 1e-12;
                let skip = (margin / self.max_segment).floor() as i64 - 1;
                raw += 1 + skip.max(0);
            }
        }
        self.normalize_s(best.1)
    }

    /// Closest point found by walking segment to segment from the one at
    /// `s_hint` while the distance keeps shrinking.
    ///
    /// Stops at the first local minimum, so it suits points a short step from
    /// an already projected one, like successive states of a predicted
    /// trajectory. Much cheaper than [`Path::project_near`] there.
    pub fn project_descend(&self, q: &Point2<f64>, s_hint: f64) -> f64 {
        let segs = self.segment_count();
        let start = self.segment_index(self.normalize_s(s_hint)).min(segs - 1);
        let next = |i: usize, up: bool| match (up, self.closed) {
            (true, _) if i + 1 < segs => Some(i + 1),
            (false, _) if i > 0 => Some(i - 1),
            (true, true) => Some(0),
            (false, true) => Some(segs - 1),
            _ => None,
        };
        let mut best = self.closest_on_segment(start, q);
        for up in [true, false] {
            let mut i = start;
            let mut moved = false;
            for _ in 0..segs {
                let Some(j) = next(i, up) else { break };
                let cand = self.closest_on_segment(j, q);
                if !strictly_closer(cand.0, best.0) {
                    break;
                }
                best = cand;
                i = j;
                moved = true;
            }
            if moved {
                break;
            }
        }
        self.normalize_s(best.1)
    }

    /// Segment containing the normalized arc length `s`.
    fn segment_index(&self, s: f64) -> usize {
        match self.cumulative_s.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i - 1,
        }
    }

    /// Interpolated pose at arc length `s` (clamped, or wrapped when closed).
    pub fn pose_at(&self, s: f64) -> PathPose {
        let s = self.normalize_s(s);
        let n = self.points.len();
        let i = self.segment_index(s);
        if !self.closed && i >= n - 1 {
            let p = self.points[n - 1];
            return PathPose { x: p.x, y: p.y, heading: self.headings[n - 1] };
        }
        let (dir, len) = self.segments[i];
        let along = (s - self.cumulative_s[i]).clamp(0.0, len);
        let p = self.points[i] + dir * along;
        let t = along / len;
        let h0 = self.headings[i];
        let h1 = self.headings[(i + 1) % n];
        PathPose { x: p.x, y: p.y, heading: wrap_angle(h0 + angle_diff(h1, h0) * t) }
    }

    /// Signed discrete curvature at every sample (turn angle over arc length).
    pub fn curvatures(&self) -> Vec<f64> {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                if !self.closed && (i == 0 || i == n - 1) {
                    return 0.0;
                }
                let prev = (i + n - 1) % n;
                let next = (i + 1) % n;
                let a = self.points[prev];
                let b = self.points[i];
                let c = self.points[next];
                // Menger curvature: 4 * area / product of side lengths
                let cross = (b - a).perp(&(c - b));
                let denom = (b - a).norm() * (c - b).norm() * (c - a).norm();
                2.0 * cross / denom
            })
            .collect()
    }
}

/// Squared-distance comparison with a relative tie band.
fn strictly_closer(d2: f64, best: f64) -> bool {
    best.is_infinite() || d2 < best - 1e-12 * best.max(1e-24)
}

fn finite_difference_headings(points: &[Point2<f64>], closed: bool) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let (a, b) = if closed {
                (points[(i + n - 1) % n], points[(i + 1) % n])
            } else if i == 0 {
                (points[0], points[1])
            } else if i == n - 1 {
                (points[n - 2], points[n - 1])
            } else {
                (points[i - 1], points[i + 1])
            };
            (b.y - a.y).atan2(b.x - a.x)
        })
        .collect()
}

/// Cubic-spline (natural end conditions) path through `waypoints`, resampled
/// at near-uniform spacing `ds`.
pub fn build_path(waypoints: &[[f64; 2]], ds: f64) -> Result<Path, GeometryError> {
    build(waypoints, ds, false)
}

/// Closed variant of [`build_path`]: periodic spline, last waypoint joins the first.
pub fn build_closed_path(waypoints: &[[f64; 2]], ds: f64) -> Result<Path, GeometryError> {
    build(waypoints, ds, true)
}

fn build(waypoints: &[[f64; 2]], ds: f64, closed: bool) -> Result<Path, GeometryError> {
    if !(ds > 0.0 && ds.is_finite()) {
        return Err(GeometryError::BadSpacing(ds));
    }
    let min = if closed { 3 } else { 2 };
    if waypoints.len() < min {
        return Err(GeometryError::TooFewPoints(waypoints.len()));
    }
    if waypoints.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let mut knots: Vec<[f64; 2]> = waypoints.to_vec();
    if closed {
        if knots.first() == knots.last() {
            knots.pop();
        }
        knots.push(knots[0]);
    }
    let mut t = vec![0.0];
    for (i, w) in knots.windows(2).enumerate() {
        let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        if d <= 0.0 {
            return Err(GeometryError::DuplicatePoint(i + 1));
        }
        t.push(t[i] + d);
    }
    let xs: Vec<f64> = knots.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = knots.iter().map(|p| p[1]).collect();
    let (sx, sy) = if closed {
        (CubicSpline::periodic(&t, &xs), CubicSpline::periodic(&t, &ys))
    } else {
        (CubicSpline::natural(&t, &xs), CubicSpline::natural(&t, &ys))
    };

    // dense polyline, then uniform resampling by arc length
    let mut dense = vec![Point2::new(xs[0], ys[0])];
    let mut dense_s = vec![0.0];
    for seg in 0..t.len() - 1 {
        let h = t[seg + 1] - t[seg];
        let pieces = ((h / ds) * 8.0).ceil().max(8.0) as usize;
        for j in 1..=pieces {
            let tt = sx.knots()[seg] + h * j as f64 / pieces as f64;
            let p = Point2::new(sx.eval_in(seg, tt), sy.eval_in(seg, tt));
            let d = (p - dense.last().unwrap()).norm();
            dense_s.push(dense_s.last().unwrap() + d);
            dense.push(p);
        }
    }
    let total = *dense_s.last().unwrap();
    let n = ((total / ds).round() as usize).max(1);
    let step = total / n as f64;
    let count = if closed { n } else { n + 1 };
    let mut out = Vec::with_capacity(count);
    let mut k = 0;
    for j in 0..count {
        let target = (step * j as f64).min(total);
        while k + 1 < dense_s.len() - 1 && dense_s[k + 1] < target {
            k += 1;
        }
        let span = dense_s[k + 1] - dense_s[k];
        let f = if span > 0.0 { ((target - dense_s[k]) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.push(dense[k] + (dense[k + 1] - dense[k]) * f);
    }
    if closed && n < 3 {
        return Err(GeometryError::TooFewPoints(n));
    }
    Path::from_points(out, closed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn straight(len: f64) -> Path {
        build_path(&[[0.0, 0.0], [len, 0.0]], 1.0).unwrap()
    }

    fn circle(radius: f64, n: usize) -> Path {
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / n as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        build_closed_path(&pts, DEFAULT_DS).unwrap()
    }

    /// Exhaustive closest-point search written independently of `project`.
    fn brute_project(path: &Path, q: &Point2<f64>) -> (f64, f64) {
        let pts = path.points();
        let n = pts.len();
        let segs = if path.is_closed() { n } else { n - 1 };
        let mut best = (f64::INFINITY, 0.0);
        let mut s0 = 0.0;
        for i in 0..segs {
            let a = pts[i];
            let b = pts[(i + 1) % n];
            let len = (b - a).norm();
            let mut t = (q - a).dot(&(b - a)) / (len * len);
            t = t.clamp(0.0, 1.0);
            let d = (q - (a + (b - a) * t)).norm();
            if d < best.0 {
                best = (d, s0 + t * len);
            }
            s0 += len;
        }
        best
    }

    #[test]
    fn two_waypoints_give_a_straight_segment() {
        let p = build_path(&[[1.0, 2.0], [4.0, 6.0]], 0.1).unwrap();
        assert_abs_diff_eq!(p.length(), 5.0, epsilon = 1e-9);
        for h in p.headings() {
            assert_abs_diff_eq!(*h, (4.0f64).atan2(3.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn project_on_sample_and_tie_break() {
        let p = straight(10.0);
        assert_abs_diff_eq!(p.project(&Point2::new(2.0, 0.0)), 2.0, epsilon = 1e-12);
        // L-shaped path: (0,0)->(4,0)->(4,4); point (5,-1)... use equidistant corner
        let l = Path::from_points(vec![Point2::new(0.0, 0.0), Point2::new(4.0, 0.0), Point2::new(4.0, 4.0), Point2::new(0.0, 4.0)], false)
            .unwrap();
        // (2, 2) is 2 m from the first, second and third segments
        assert_abs_diff_eq!(l.project(&Point2::new(2.0, 2.0)), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wps: Vec<[f64; 2]> = (0..12).map(|i| [i as f64 * 5.0, rng.random_range(-4.0..4.0)]).collect();
        let path = build_path(&wps, 0.1).unwrap();
        let ring = circle(10.0, 40);
        for p in [&path, &ring] {
            for _ in 0..200 {
                let q = Point2::new(rng.random_range(-15.0..60.0), rng.random_range(-15.0..15.0));
                let s = p.project(&q);
                let (d_oracle, s_oracle) = brute_project(p, &q);
                let pose = p.pose_at(s);
                let d = (q - Point2::new(pose.x, pose.y)).norm();
                assert!((d - d_oracle).abs() < 1e-9);
                assert!(p.s_diff(s, s_oracle).abs() < 1e-9, "{s} vs {s_oracle}");
            }
        }
    }

    #[test]
    fn pose_at_clamps_and_interpolates() {
        let p = straight(10.0);
        let first = p.pose_at(0.0);
        assert_eq!((first.x, first.y), (0.0, 0.0));
        let last = p.pose_at(25.0);
        assert_abs_diff_eq!(last.x, 10.0, epsilon = 1e-12);
        let mid = p.pose_at(3.5);
        assert_abs_diff_eq!(mid.x, 3.5, epsilon = 1e-12);
    }

    #[test]
    fn circle_arc_length_matches_closed_form() {
        // s = 5 pi is a quarter turn on radius 10 and a half turn on radius 5
        for (radius, expect) in [(10.0, [0.0, 10.0]), (5.0, [-5.0, 0.0])] {
            let ring = circle(radius, 64);
            assert_abs_diff_eq!(ring.length(), 2.0 * PI * radius, epsilon = 1e-3);
            let p = ring.pose_at(5.0 * PI);
            assert_abs_diff_eq!(p.x, expect[0], epsilon = 1e-3);
            assert_abs_diff_eq!(p.y, expect[1], epsilon = 1e-3);
        }
    }

    #[test]
    fn square_perimeter() {
        let mut wps = Vec::new();
        let side = 20.0;
        let corners = [[0.0, 0.0], [side, 0.0], [side, side], [0.0, side]];
        for c in 0..4 {
            let a = corners[c];
            let b = corners[(c + 1) % 4];
            for j in 0..20 {
                let f = j as f64 / 20.0;
                wps.push([a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f]);
            }
        }
        wps.push([0.0, 0.0]);
        let p = build_path(&wps, 0.1).unwrap();
        let perimeter = 4.0 * side;
        assert!((p.length() - perimeter).abs() / perimeter < 0.02, "{}", p.length());
    }

    #[test]
    fn spacing_and_heading_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wps: Vec<[f64; 2]> = (0..8).map(|i| [i as f64 * 7.0, rng.random_range(-5.0..5.0)]).collect();
        let ds = 0.1;
        let p = build_path(&wps, ds).unwrap();
        let s = p.cumulative_s();
        for w in s.windows(2) {
            let gap = w[1] - w[0];
            assert!(gap > 0.5 * ds && gap < 1.5 * ds);
        }
        let pts = p.points();
        for i in 1..pts.len() - 1 {
            let fd = (pts[i + 1].y - pts[i - 1].y).atan2(pts[i + 1].x - pts[i - 1].x);
            assert!(angle_diff(p.headings()[i], fd).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_waypoints_rejected() {
        assert!(matches!(build_path(&[[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [2.0, 1.0]], 0.1), Err(GeometryError::DuplicatePoint(2))));
        assert!(matches!(build_path(&[[0.0, 0.0]], 0.1), Err(GeometryError::TooFewPoints(1))));
    }

    #[test]
    fn closed_s_arithmetic() {
        let ring = circle(10.0, 32);
        let len = ring.length();
        assert_abs_diff_eq!(ring.s_diff(1.0, len - 1.0), 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ring.s_diff(len - 1.0, 1.0), -2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ring.normalize_s(len + 3.0), 3.0, epsilon = 1e-9);
    }

    #[test]
    fn project_near_stays_on_the_hinted_branch() {
        let path = super::super::infinity_loop(20.0, DEFAULT_DS).unwrap();
        // the two lobes touch at the origin
        let q = Point2::new(0.0, 0.05);
        let len = path.length();
        let near_start = path.project_near(&q, 1.0, 10.0);
        let near_middle = path.project_near(&q, 0.5 * len - 1.0, 10.0);
        assert!(path.s_diff(near_start, 0.0).abs() < 1.0);
        assert!(path.s_diff(near_middle, 0.5 * len).abs() < 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn round_trip_is_closest(x in -5.0..45.0f64, y in -8.0..8.0f64) {
                let path = build_path(&[[0.0, 0.0], [10.0, 3.0], [20.0, -2.0], [30.0, 0.0], [40.0, 4.0]], 0.1).unwrap();
                let q = Point2::new(x, y);
                let s = path.project(&q);
                let pose = path.pose_at(s);
                let d = (q - Point2::new(pose.x, pose.y)).norm();
                for p in path.points() {
                    prop_assert!(d <= (q - p).norm() + 1e-9);
                }
            }

            #[test]
            fn projection_is_lipschitz_along_the_path(s in 1.0..38.0f64, eps in 0.0..0.5f64) {
                let path = build_path(&[[0.0, 0.0], [10.0, 3.0], [20.0, -2.0], [30.0, 0.0], [40.0, 4.0]], 0.1).unwrap();
                let a = path.pose_at(s);
                let b = path.pose_at(s + eps);
                let sa = path.project(&Point2::new(a.x, a.y));
                let sb = path.project(&Point2::new(b.x, b.y));
                prop_assert!((sb - sa).abs() <= eps + 2.0 * path.spacing());
            }

            #[test]
            fn pruned_window_search_matches_a_full_scan(
                s_hint in 0.0..250.0f64,
                window in 0.5..60.0f64,
                x in -45.0..45.0f64,
                y in -25.0..25.0f64,
            ) {
                let path = super::super::super::infinity_loop(20.0, DEFAULT_DS).unwrap();
                let q = Point2::new(x, y);
                let got = path.project_near(&q, s_hint, window);
                // every segment whose index falls in the window, no pruning
                let n = path.points().len() as i64;
                let lo = ((s_hint - window) / path.spacing()).floor() as i64 - 1;
                let hi = ((s_hint + window) / path.spacing()).ceil() as i64 + 1;
                let mut best = f64::INFINITY;
                if 2.0 * window >= path.length() {
                    best = brute_project(&path, &q).0;
                } else {
                    for raw in lo..=hi {
                        let i = raw.rem_euclid(n) as usize;
                        let a = path.points()[i];
                        let b = path.points()[(i + 1) % n as usize];
                        let t = ((q - a).dot(&(b - a)) / (b - a).norm_squared()).clamp(0.0, 1.0);
                        best = best.min((q - (a + (b - a) * t)).norm());
                    }
                }
                let pose = path.pose_at(got);
                let d = (q - Point2::new(pose.x, pose.y)).norm();
                prop_assert!((d - best).abs() < 1e-9, "pruned {} vs full {}", d, best);
            }
        }
    }
}
