use super::{GeometryError, Path};
use crate::dynamics::VehicleState;
use serde::{Deserialize, Serialize};

/// Boolean occupancy grid; cell `(ix, iy)` covers
/// `[origin + i * resolution, origin + (i + 1) * resolution)` on each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMap {
    origin: [f64; 2],
    resolution: f64,
    width: usize,
    height: usize,
    cells: Vec<bool>,
}

impl OccupancyMap {
    /// Empty map covering `width x height` cells.
    pub fn new(origin: [f64; 2], resolution: f64, width: usize, height: usize) -> Result<Self, GeometryError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GeometryError::BadMap(format!("resolution {resolution}")));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::BadMap("grid must be non-empty".into()));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { origin, resolution, width, height, cells: vec![false; width * height] })
    }

    /// Empty map enclosing an axis-aligned box with `margin` on every side.
    pub fn covering(min: [f64; 2], max: [f64; 2], margin: f64, resolution: f64) -> Result<Self, GeometryError> {
        let origin = [min[0] - margin, min[1] - margin];
        let width = ((max[0] - min[0] + 2.0 * margin) / resolution).ceil() as usize;
        let height = ((max[1] - min[1] + 2.0 * margin) / resolution).ceil() as usize;
        Self::new(origin, resolution, width, height)
    }

    /// Empty map enclosing `path` with `margin` to spare.
    pub fn around_path(path: &Path, margin: f64, resolution: f64) -> Result<Self, GeometryError> {
        let (mut min, mut max) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in path.points() {
            min = [min[0].min(p.x), min[1].min(p.y)];
            max = [max[0].max(p.x), max[1].max(p.y)];
        }
        Self::covering(min, max, margin, resolution)
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn occupied(&self, ix: usize, iy: usize) -> bool {
        self.cells[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, value: bool) {
        self.cells[iy * self.width + ix] = value;
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// Cell containing `(x, y)`, if inside the map.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin[0]) / self.resolution).floor();
        let fy = ((y - self.origin[1]) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.width as f64 || fy >= self.height as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some()
    }

    /// Distance from `(x, y)` to the closed rectangle of cell `(ix, iy)`.
    pub fn cell_distance(&self, ix: usize, iy: usize, x: f64, y: f64) -> f64 {
        let x0 = self.origin[0] + ix as f64 * self.resolution;
        let y0 = self.origin[1] + iy as f64 * self.resolution;
        let dx = (x0 - x).max(0.0).max(x - (x0 + self.resolution));
        let dy = (y0 - y).max(0.0).max(y - (y0 + self.resolution));
        dx.hypot(dy)
    }

    /// Index range of cells whose rectangles may lie within `r` of `(x, y)`.
    fn window(&self, x: f64, y: f64, r: f64) -> (usize, usize, usize, usize) {
        // one extra cell on the low side absorbs rounding at cell boundaries
        let lo = |v: f64, o: f64| (((v - r - o) / self.resolution).floor() - 1.0).max(0.0) as usize;
        let hi = |v: f64, o: f64, n: usize| (((v + r - o) / self.resolution).floor().max(-1.0) as i64).min(n as i64 - 1);
        let x1 = hi(x, self.origin[0], self.width);
        let y1 = hi(y, self.origin[1], self.height);
        if x1 < 0 || y1 < 0 {
            return (1, 0, 1, 0);
        }
        (lo(x, self.origin[0]), x1 as usize, lo(y, self.origin[1]), y1 as usize)
    }

    /// Sets every cell whose rectangle intersects the disk to `value`.
    pub fn fill_disk(&mut self, x: f64, y: f64, radius: f64, value: bool) {
        let (x0, x1, y0, y1) = self.window(x, y, radius);
        for iy in y0..=y1.min(self.height - 1) {
            for ix in x0..=x1.min(self.width - 1) {
                if self.cell_distance(ix, iy, x, y) <= radius {
                    self.set(ix, iy, value);
                }
            }
        }
    }

    /// Marks every cell whose center lies within the disk.
    fn fill_disk_centers(&mut self, x: f64, y: f64, radius: f64, value: bool) {
        let (x0, x1, y0, y1) = self.window(x, y, radius);
        let h = 0.5 * self.resolution;
        for iy in y0..=y1.min(self.height - 1) {
            for ix in x0..=x1.min(self.width - 1) {
                let cx = self.origin[0] + ix as f64 * self.resolution + h;
                let cy = self.origin[1] + iy as f64 * self.resolution + h;
                if (cx - x).hypot(cy - y) <= radius {
                    self.set(ix, iy, value);
                }
            }
        }
    }

    /// Walls of `thickness` on both sides of `path` leaving a free corridor
    /// of `half_width` around its centerline. Open paths stay open at the ends.
    pub fn add_corridor(&mut self, path: &Path, half_width: f64, thickness: f64) {
        for p in path.points() {
            self.fill_disk_centers(p.x, p.y, half_width + thickness, true);
        }
        for p in path.points() {
            self.fill_disk_centers(p.x, p.y, half_width, false);
        }
        if !path.is_closed() {
            // extend the free corridor past the ends so vehicles can enter and leave
            let pts = path.points();
            for (p, q) in [(pts[0], pts[1]), (pts[pts.len() - 1], pts[pts.len() - 2])] {
                let dir = (p - q).normalize();
                let steps = ((half_width + thickness) / (0.5 * self.resolution)).ceil() as usize + 1;
                for k in 0..=steps {
                    let c = p + dir * (k as f64 * 0.5 * self.resolution);
                    self.fill_disk_centers(c.x, c.y, half_width + thickness, false);
                }
            }
        }
    }
}

/// True iff no occupied cell lies within `robot_radius` of any trajectory
/// point. Points outside the map count as blocked.
pub fn path_clear(map: &OccupancyMap, states: &[VehicleState], robot_radius: f64) -> bool {
    let r = robot_radius.max(0.0);
    states.iter().all(|s| {
        if !map.contains(s.x, s.y) {
            return false;
        }
        let (x0, x1, y0, y1) = map.window(s.x, s.y, r);
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                if map.occupied(ix, iy) && map.cell_distance(ix, iy, s.x, s.y) <= r {
                    return false;
                }
            }
        }
        true
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{straight, DEFAULT_DS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn at(x: f64, y: f64) -> VehicleState {
        VehicleState::new(x, y, 0.0, 1.0)
    }

    #[test]
    fn empty_map_is_clear() {
        let m = OccupancyMap::new([0.0, 0.0], 0.5, 20, 20).unwrap();
        let traj: Vec<_> = (0..20).map(|i| at(0.5 * i as f64, 3.0)).collect();
        assert!(path_clear(&m, &traj, 1.0));
    }

    #[test]
    fn occupied_cell_under_a_point() {
        let mut m = OccupancyMap::new([0.0, 0.0], 1.0, 10, 10).unwrap();
        m.set(3, 4, true);
        assert!(!path_clear(&m, &[at(3.5, 4.5)], 0.0));
        assert!(path_clear(&m, &[at(5.5, 4.5)], 0.0));
        assert!(!path_clear(&m, &[at(5.5, 4.5)], 1.5));
    }

    #[test]
    fn outside_the_map_is_blocked() {
        let m = OccupancyMap::new([0.0, 0.0], 1.0, 10, 10).unwrap();
        assert!(!path_clear(&m, &[at(-0.1, 5.0)], 0.0));
        assert!(!path_clear(&m, &[at(5.0, 10.0)], 0.0));
    }

    #[test]
    fn bad_maps_rejected() {
        assert!(OccupancyMap::new([0.0, 0.0], 0.0, 10, 10).is_err());
        assert!(OccupancyMap::new([0.0, 0.0], 1.0, 0, 10).is_err());
    }

    #[test]
    fn matches_exhaustive_distance_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut blocked = 0;
        for _ in 0..100 {
            let res = rng.random_range(0.1..0.6);
            let mut m = OccupancyMap::new([rng.random_range(-3.0..0.0), rng.random_range(-3.0..0.0)], res, 40, 30).unwrap();
            let fill = rng.random_range(0.0..0.02);
            for iy in 0..m.height() {
                for ix in 0..m.width() {
                    if rng.random_bool(fill) {
                        m.set(ix, iy, true);
                    }
                }
            }
            let radius = rng.random_range(0.0..1.0);
            let traj: Vec<_> = (0..8).map(|_| at(rng.random_range(-2.0..10.0), rng.random_range(-2.0..8.0))).collect();
            let oracle = traj.iter().all(|s| {
                let inside = s.x >= m.origin()[0]
                    && s.y >= m.origin()[1]
                    && s.x < m.origin()[0] + m.width() as f64 * res
                    && s.y < m.origin()[1] + m.height() as f64 * res;
                inside
                    && (0..m.height()).all(|iy| {
                        (0..m.width()).all(|ix| {
                            let cx = m.origin()[0] + (ix as f64 + 0.5) * res;
                            let cy = m.origin()[1] + (iy as f64 + 0.5) * res;
                            let dx = ((s.x - cx).abs() - 0.5 * res).max(0.0);
                            let dy = ((s.y - cy).abs() - 0.5 * res).max(0.0);
                            !m.occupied(ix, iy) || dx.hypot(dy) > radius
                        })
                    })
            });
            let got = path_clear(&m, &traj, radius);
            assert_eq!(got, oracle);
            blocked += usize::from(!got);
        }
        assert!(blocked > 10 && blocked < 90, "{blocked}");
    }

    #[test]
    fn corridor_leaves_the_centerline_free() {
        let p = straight(30.0, DEFAULT_DS).unwrap();
        let mut m = OccupancyMap::around_path(&p, 5.0, 0.2).unwrap();
        m.add_corridor(&p, 1.5, 0.6);
        let center: Vec<_> = (0..=30).map(|i| at(i as f64, 0.0)).collect();
        assert!(path_clear(&m, &center, 1.0));
        let wall: Vec<_> = (5..=25).map(|i| at(i as f64, 1.8)).collect();
        assert!(!path_clear(&m, &wall, 0.0));
        assert!(m.occupied_count() > 0);
    }
}
