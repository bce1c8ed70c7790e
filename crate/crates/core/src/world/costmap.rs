use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Pose2D, Vec2};

pub const FREE: u8 = 0;
/// Cost written into cells covered by a social region.
pub const SOCIAL: u8 = 254;
pub const LETHAL: u8 = 255;
/// Cells at or above this cost are impassable for every planner.
pub const BLOCKED_THRESHOLD: u8 = 253;

/// Highest cost of the graded inflation band around obstacles.
const MAX_INFLATED: u8 = 252;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("point ({x:.3}, {y:.3}) lies outside the map")]
    OutOfRange { x: f64, y: f64 },
    #[error("invalid map geometry: {0}")]
    InvalidGeometry(String),
    #[error("map file: {0}")]
    File(String),
}

/// Row-major grid of cell costs. Cell `(i, j)` covers
/// `[ox + i*res, ox + (i+1)*res) x [oy + j*res, oy + (j+1)*res)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMap {
    resolution: f64,
    origin: Pose2D,
    width: usize,
    height: usize,
    cost: Vec<u8>,
}

impl CostMap {
    pub fn new(width: usize, height: usize, resolution: f64, origin: Vec2) -> Result<Self, MapError> {
        if width == 0 || height == 0 {
            return Err(MapError::InvalidGeometry("map must have at least one cell".into()));
        }
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(MapError::InvalidGeometry(format!("resolution {resolution} must be > 0")));
        }
        if !(origin.x.is_finite() && origin.y.is_finite()) {
            return Err(MapError::InvalidGeometry("origin must be finite".into()));
        }
        let cells = width
            .checked_mul(height)
            .filter(|n| *n <= 64 << 20)
            .ok_or_else(|| MapError::InvalidGeometry("map too large".into()))?;
        Ok(CostMap {
            resolution,
            origin: Pose2D::new(origin.x, origin.y, 0.0),
            width,
            height,
            cost: vec![FREE; cells],
        })
    }

    /// Map of the given metric extent with its origin at `(0, 0)`.
    pub fn with_extent(width_m: f64, height_m: f64, resolution: f64) -> Result<Self, MapError> {
        if !(width_m > 0.0 && height_m > 0.0 && resolution > 0.0) {
            return Err(MapError::InvalidGeometry("extent and resolution must be > 0".into()));
        }
        let w = (width_m / resolution).round() as usize;
        let h = (height_m / resolution).round() as usize;
        CostMap::new(w, h, resolution, Vec2::zeros())
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Pose2D {
        self.origin
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn costs(&self) -> &[u8] {
        &self.cost
    }

    /// Lower-left and upper-right corners in world coordinates.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        let lo = self.origin.position();
        let hi = lo + Vec2::new(self.width as f64, self.height as f64) * self.resolution;
        (lo, hi)
    }

    pub fn world_to_grid(&self, p: Vec2) -> Result<(usize, usize), MapError> {
        let fx = ((p.x - self.origin.x) / self.resolution).floor();
        let fy = ((p.y - self.origin.y) / self.resolution).floor();
        if !(fx >= 0.0 && fy >= 0.0 && fx < self.width as f64 && fy < self.height as f64) {
            return Err(MapError::OutOfRange { x: p.x, y: p.y });
        }
        Ok((fx as usize, fy as usize))
    }

    /// Center of cell `(i, j)`.
    pub fn grid_to_world(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (i as f64 + 0.5) * self.resolution,
            self.origin.y + (j as f64 + 0.5) * self.resolution,
        )
    }

    pub fn in_bounds(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height
    }

    pub fn cell(&self, i: usize, j: usize) -> u8 {
        self.cost[j * self.width + i]
    }

    pub fn set_cell(&mut self, i: usize, j: usize, c: u8) {
        self.cost[j * self.width + i] = c;
    }

    /// Cost under `p`; anything outside the map is lethal.
    pub fn cost_at(&self, p: Vec2) -> u8 {
        match self.world_to_grid(p) {
            Ok((i, j)) => self.cell(i, j),
            Err(_) => LETHAL,
        }
    }

    pub fn is_blocked_at(&self, p: Vec2) -> bool {
        self.cost_at(p) >= BLOCKED_THRESHOLD
    }

    /// True when every point sampled along `a -> b` (at most `step` apart) is passable.
    pub fn segment_free(&self, a: Vec2, b: Vec2, step: f64) -> bool {
        let len = (b - a).norm();
        let n = (len / step).ceil().max(1.0) as usize;
        (0..=n).all(|k| {
            let p = a + (b - a) * (k as f64 / n as f64);
            !self.is_blocked_at(p)
        })
    }

    /// Every cell the segment `a -> b` touches, in order (grid traversal;
    /// both neighbors are included when the segment crosses a cell corner).
    pub fn traverse(&self, a: Vec2, b: Vec2) -> Vec<(i64, i64)> {
        let o = self.origin.position();
        let fa = (a - o) / self.resolution;
        let fb = (b - o) / self.resolution;
        let (mut i, mut j) = (fa.x.floor() as i64, fa.y.floor() as i64);
        let (ie, je) = (fb.x.floor() as i64, fb.y.floor() as i64);
        let d = fb - fa;
        let axis = |d: f64, f: f64, c: i64| -> (i64, f64, f64) {
            if d > 0.0 {
                (1, (c as f64 + 1.0 - f) / d, 1.0 / d)
            } else if d < 0.0 {
                (-1, (f - c as f64) / -d, -1.0 / d)
            } else {
                (0, f64::INFINITY, f64::INFINITY)
            }
        };
        let (si, mut tx, dx) = axis(d.x, fa.x, i);
        let (sj, mut ty, dy) = axis(d.y, fa.y, j);
        let mut out = vec![(i, j)];
        let budget = (ie - i).abs() + (je - j).abs() + 2;
        for _ in 0..budget {
            if (i, j) == (ie, je) || (tx > 1.0 && ty > 1.0) {
                break;
            }
            if tx < ty {
                i += si;
                tx += dx;
            } else if ty < tx {
                j += sj;
                ty += dy;
            } else {
                out.push((i + si, j));
                out.push((i, j + sj));
                i += si;
                j += sj;
                tx += dx;
                ty += dy;
            }
            out.push((i, j));
        }
        out
    }

    /// Highest cost on any cell the segment touches; off-map cells are lethal.
    pub fn segment_max_cost(&self, a: Vec2, b: Vec2) -> u8 {
        self.traverse(a, b)
            .into_iter()
            .map(|(i, j)| {
                if self.in_bounds(i, j) {
                    self.cell(i as usize, j as usize)
                } else {
                    LETHAL
                }
            })
            .max()
            .unwrap_or(LETHAL)
    }

    /// Marks every cell whose center lies in the axis-aligned rectangle as lethal.
    pub fn fill_rect(&mut self, min: Vec2, max: Vec2) {
        for j in 0..self.height {
            for i in 0..self.width {
                let c = self.grid_to_world(i, j);
                if c.x >= min.x && c.x <= max.x && c.y >= min.y && c.y <= max.y {
                    self.set_cell(i, j, LETHAL);
                }
            }
        }
    }

    /// Footprint inflation: cells within `robot_radius` of a lethal cell become
    /// lethal; cells in the following `band` meters get a cost decaying from
    /// 252 towards 1. Returns a new map.
    pub fn inflate(&self, robot_radius: f64, band: f64) -> CostMap {
        let mut out = self.clone();
        let reach = robot_radius + band.max(0.0);
        let k = (reach / self.resolution).ceil() as i64;
        let res = self.resolution;
        let (w, h) = (self.width as i64, self.height as i64);
        // Only obstacle cells on the boundary of an obstacle region can be the nearest one.
        let is_edge = |i: i64, j: i64| {
            [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(di, dj)| {
                let (ni, nj) = (i + di, j + dj);
                self.in_bounds(ni, nj) && self.cell(ni as usize, nj as usize) < LETHAL
            })
        };
        for j in 0..h {
            for i in 0..w {
                if self.cell(i as usize, j as usize) < LETHAL || !is_edge(i, j) {
                    continue;
                }
                for dj in -k..=k {
                    for di in -k..=k {
                        let (ni, nj) = (i + di, j + dj);
                        if !self.in_bounds(ni, nj) {
                            continue;
                        }
                        let d = ((di * di + dj * dj) as f64).sqrt() * res;
                        let c = if d <= robot_radius + 1e-9 {
                            LETHAL
                        } else if d <= reach + 1e-9 && band > 0.0 {
                            let frac = ((d - robot_radius) / band).max(0.0);
                            let v = (MAX_INFLATED as f64) * (-3.0 * frac).exp();
                            (v.round() as u8).clamp(1, MAX_INFLATED)
                        } else {
                            continue;
                        };
                        let idx = nj as usize * self.width + ni as usize;
                        if c > out.cost[idx] {
                            out.cost[idx] = c;
                        }
                    }
                }
            }
        }
        out
    }
}
