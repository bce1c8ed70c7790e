//! Global reference path: 8-connected A* over the footprint-inflated cost
//! map, followed by line-of-sight shortcutting and densification.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{CostMap, Pose2D, Vec2, BLOCKED_THRESHOLD};

pub const MAX_SEGMENT: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("start is outside the map or in a blocked cell")]
    StartBlocked,
    #[error("goal is outside the map or in a blocked cell")]
    GoalBlocked,
    #[error("goal unreachable")]
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Path {
    pub waypoints: Vec<Vec2>,
    /// Traversal cost of the underlying search (length weighted by cell cost).
    pub cost: f64,
}

/// Foot of the projection of a point on a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub segment: usize,
    pub point: Vec2,
    pub arc: f64,
    pub distance: f64,
}

impl Path {
    pub fn new(waypoints: Vec<Vec2>) -> Self {
        Path { waypoints, cost: 0.0 }
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Inserts points so that no segment is longer than `max_seg`.
    pub fn densified(&self, max_seg: f64) -> Path {
        let mut out = Vec::with_capacity(self.waypoints.len());
        for w in self.waypoints.windows(2) {
            let n = ((w[1] - w[0]).norm() / max_seg).ceil().max(1.0) as usize;
            for k in 0..n {
                out.push(w[0] + (w[1] - w[0]) * (k as f64 / n as f64));
            }
        }
        if let Some(last) = self.waypoints.last() {
            out.push(*last);
        }
        Path {
            waypoints: out,
            cost: self.cost,
        }
    }

    /// Closest point on the polyline. `None` for an empty path.
    pub fn project(&self, p: Vec2) -> Option<Projection> {
        let w = &self.waypoints;
        if w.len() == 1 {
            return Some(Projection {
                segment: 0,
                point: w[0],
                arc: 0.0,
                distance: (p - w[0]).norm(),
            });
        }
        let mut best: Option<Projection> = None;
        let mut arc = 0.0;
        for (k, s) in w.windows(2).enumerate() {
            let d = s[1] - s[0];
            let l2 = d.norm_squared();
            let t = if l2 > 0.0 { ((p - s[0]).dot(&d) / l2).clamp(0.0, 1.0) } else { 0.0 };
            let q = s[0] + d * t;
            let dist = (p - q).norm();
            if best.is_none_or(|b| dist < b.distance) {
                best = Some(Projection {
                    segment: k,
                    point: q,
                    arc: arc + l2.sqrt() * t,
                    distance: dist,
                });
            }
            arc += l2.sqrt();
        }
        best
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> Option<Vec2> {
        let w = &self.waypoints;
        let first = *w.first()?;
        if s <= 0.0 {
            return Some(first);
        }
        let mut acc = 0.0;
        for seg in w.windows(2) {
            let l = (seg[1] - seg[0]).norm();
            if acc + l >= s && l > 0.0 {
                return Some(seg[0] + (seg[1] - seg[0]) * ((s - acc) / l));
            }
            acc += l;
        }
        w.last().copied()
    }

    /// Direction of travel at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let w = &self.waypoints;
        let mut acc = 0.0;
        let mut last = 0.0;
        for seg in w.windows(2) {
            let d = seg[1] - seg[0];
            let l = d.norm();
            if l > 0.0 {
                last = d.y.atan2(d.x);
                if acc + l >= s {
                    return last;
                }
            }
            acc += l;
        }
        last
    }

    /// Sub-path from arc length `s` to the end.
    pub fn tail_from(&self, s: f64) -> Path {
        let mut out = Vec::new();
        if let Some(p) = self.point_at(s) {
            out.push(p);
        }
        let mut acc = 0.0;
        for seg in self.waypoints.windows(2) {
            acc += (seg[1] - seg[0]).norm();
            if acc > s + 1e-9 {
                out.push(seg[1]);
            }
        }
        Path::new(out)
    }
}

fn step_cost(len: f64, cell_cost: u8) -> f64 {
    len * (1.0 + cell_cost as f64 / 128.0)
}

const NEIGHBORS: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

#[derive(PartialEq)]
struct Entry {
    f: f64,
    h: f64,
    idx: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // min-heap on f, then on h
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.h.total_cmp(&self.h))
            .then(other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A* over cells. Returns the cell path and its cost.
pub fn astar_cells(map: &CostMap, start: (usize, usize), goal: (usize, usize)) -> Option<(Vec<(usize, usize)>, f64)> {
    let (w, h) = (map.width(), map.height());
    let res = map.resolution();
    let idx = |c: (usize, usize)| c.1 * w + c.0;
    let heur = |c: (usize, usize)| {
        let dx = (c.0 as f64 - goal.0 as f64).abs();
        let dy = (c.1 as f64 - goal.1 as f64).abs();
        // octile distance, admissible since every step costs at least its length
        res * (dx.max(dy) + (std::f64::consts::SQRT_2 - 1.0) * dx.min(dy))
    };
    let mut g = vec![f64::INFINITY; w * h];
    let mut parent = vec![usize::MAX; w * h];
    let mut closed = vec![false; w * h];
    let mut open = BinaryHeap::new();
    g[idx(start)] = 0.0;
    open.push(Entry {
        f: heur(start),
        h: heur(start),
        idx: idx(start),
    });
    while let Some(Entry { idx: cur, .. }) = open.pop() {
        if closed[cur] {
            continue;
        }
        closed[cur] = true;
        if cur == idx(goal) {
            let mut cells = vec![goal];
            let mut k = cur;
            while parent[k] != usize::MAX {
                k = parent[k];
                cells.push((k % w, k / w));
            }
            cells.reverse();
            return Some((cells, g[cur]));
        }
        let (ci, cj) = ((cur % w) as i64, (cur / w) as i64);
        for (di, dj) in NEIGHBORS {
            let (ni, nj) = (ci + di, cj + dj);
            if !map.in_bounds(ni, nj) {
                continue;
            }
            let n = (ni as usize, nj as usize);
            let c = map.cell(n.0, n.1);
            if c >= BLOCKED_THRESHOLD || closed[idx(n)] {
                continue;
            }
            // no squeezing diagonally between two blocked cells' corners
            if di != 0 && dj != 0 && (map.cell(n.0, cj as usize) >= BLOCKED_THRESHOLD || map.cell(ci as usize, n.1) >= BLOCKED_THRESHOLD) {
                continue;
            }
            let len = if di != 0 && dj != 0 { res * std::f64::consts::SQRT_2 } else { res };
            let cand = g[cur] + step_cost(len, c);
            if cand < g[idx(n)] {
                g[idx(n)] = cand;
                parent[idx(n)] = cur;
                let hn = heur(n);
                open.push(Entry {
                    f: cand + hn,
                    h: hn,
                    idx: idx(n),
                });
            }
        }
    }
    None
}

/// Greedy line-of-sight shortcutting. A shortcut is taken only when it
/// stays free and never touches a costlier cell than the stretch it replaces.
pub fn shortcut(points: &[Vec2], map: &CostMap) -> Vec<Vec2> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut out = vec![points[0]];
    let mut i = 0;
    while i + 1 < points.len() {
        let mut best = i + 1;
        let mut stretch_max = map.segment_max_cost(points[i], points[i + 1]);
        for j in i + 2..points.len() {
            stretch_max = stretch_max.max(map.segment_max_cost(points[j - 1], points[j]));
            let direct = map.segment_max_cost(points[i], points[j]);
            if direct < BLOCKED_THRESHOLD && direct <= stretch_max {
                best = j;
            }
        }
        out.push(points[best]);
        i = best;
    }
    out
}

/// Reference path from `start` to `goal` on an already inflated map.
pub fn plan_global(start: Pose2D, goal: Pose2D, map: &CostMap) -> Result<Path, PlanError> {
    let s = map.world_to_grid(start.position()).map_err(|_| PlanError::StartBlocked)?;
    let g = map.world_to_grid(goal.position()).map_err(|_| PlanError::GoalBlocked)?;
    if map.cell(s.0, s.1) >= BLOCKED_THRESHOLD {
        return Err(PlanError::StartBlocked);
    }
    if map.cell(g.0, g.1) >= BLOCKED_THRESHOLD {
        return Err(PlanError::GoalBlocked);
    }
    let (cells, cost) = astar_cells(map, s, g).ok_or(PlanError::Unreachable)?;
    let mut pts: Vec<Vec2> = cells.iter().map(|&(i, j)| map.grid_to_world(i, j)).collect();
    pts[0] = start.position();
    *pts.last_mut().expect("non-empty") = goal.position();
    let smooth = shortcut(&pts, map);
    Ok(Path { waypoints: smooth, cost }.densified(MAX_SEGMENT))
}
