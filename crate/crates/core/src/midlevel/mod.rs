//! Group-aware mid-level replanning: keep the reference path while it stays
//! clear of every social space, otherwise detour around the conflict with
//! BIT* and rejoin the reference beyond it.

mod bitstar;

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::GroupEstimate;
use crate::geometry::{point_in_region, update_costmap, SocialSpace};
use crate::global::{Path, MAX_SEGMENT};
use crate::world::{CostMap, Pose2D, Vec2, BLOCKED_THRESHOLD};

pub use bitstar::{plan_bitstar, BitStarError, BitStarParams, BitStarResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocialParams {
    /// Ellipse half-width around hull edges (m).
    pub margin: f64,
    /// Extra margin used only when planning detours (m).
    pub planning_clearance: f64,
    /// Lateral distance of the new goal from the reference path (m).
    pub goal_offset: f64,
}

impl Default for SocialParams {
    fn default() -> Self {
        SocialParams {
            margin: 0.5,
            planning_clearance: 0.8,
            goal_offset: 1.0,
        }
    }
}

impl SocialParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err("social margin must be > 0".into());
        }
        if !(self.planning_clearance.is_finite() && self.planning_clearance >= 0.0) {
            return Err("planning_clearance must be >= 0".into());
        }
        if !(self.goal_offset.is_finite() && self.goal_offset > 0.0) {
            return Err("goal_offset must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MidLevelError {
    #[error("empty reference path")]
    EmptyReference,
    #[error("no free goal candidate past the conflict")]
    NoGoalCandidate,
    #[error("no free cell near the robot")]
    Trapped,
    #[error(transparent)]
    BitStar(#[from] BitStarError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidLevelFlag {
    KeptReference,
    Replanned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidLevelOutput {
    pub active: Path,
    pub flag: MidLevelFlag,
    pub goal: Option<Pose2D>,
    /// Number of blocked samples on the remaining reference.
    pub conflict_samples: usize,
    /// A fresh BIT* query ran this cycle.
    pub planned: bool,
}

/// Points along `path` spaced at most `step` apart, with their arc lengths.
fn samples(path: &Path, from_arc: f64, step: f64) -> Vec<(f64, Vec2)> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    for seg in path.waypoints.windows(2) {
        let l = (seg[1] - seg[0]).norm();
        let n = (l / step).ceil().max(1.0) as usize;
        for k in 0..n {
            let s = acc + l * k as f64 / n as f64;
            if s >= from_arc {
                out.push((s, seg[0] + (seg[1] - seg[0]) * (k as f64 / n as f64)));
            }
        }
        acc += l;
    }
    if let Some(last) = path.waypoints.last() {
        out.push((acc, *last));
    }
    out
}

/// True iff a point sampled along the path at half-cell spacing lies in a
/// blocked cell.
pub fn is_collided(path: &Path, map: &CostMap) -> bool {
    samples(path, 0.0, map.resolution() / 2.0)
        .iter()
        .any(|(_, p)| map.is_blocked_at(*p))
}

/// First blocked stretch of `path` at or after `from_arc`: (enter, exit, blocked sample count).
pub fn first_conflict(path: &Path, map: &CostMap, from_arc: f64) -> Option<(f64, f64, usize)> {
    let pts = samples(path, from_arc, map.resolution() / 2.0);
    let start = pts.iter().position(|(_, p)| map.is_blocked_at(*p))?;
    let enter = pts[start].0;
    let mut exit = pts.last().map_or(enter, |l| l.0);
    let mut count = 0;
    for (s, p) in &pts[start..] {
        if map.is_blocked_at(*p) {
            count += 1;
        } else {
            exit = *s;
            break;
        }
    }
    Some((enter, exit, count))
}

/// Goal for the detour: walking the reference beyond the first conflict
/// ahead of the robot, the first point offset laterally (left, then right)
/// that is free and outside every social region. Falls back to the first
/// free on-path point past the conflict.
pub fn sample_new_goal(
    reference: &Path,
    robot: &Pose2D,
    spaces: &[SocialSpace],
    map: &CostMap,
    offset: f64,
) -> Result<Pose2D, MidLevelError> {
    let proj = reference.project(robot.position()).ok_or(MidLevelError::EmptyReference)?;
    let from = first_conflict(reference, map, proj.arc).map_or(proj.arc, |c| c.1);
    let ok = |p: Vec2| !map.is_blocked_at(p) && !point_in_region(p, spaces);
    let step = map.resolution();
    let len = reference.length();
    let n = ((len - from).max(0.0) / step).floor() as usize;
    let cands: Vec<(f64, Vec2)> = (0..=n)
        .map(|k| from + step * k as f64)
        .chain(std::iter::once(len))
        .filter_map(|s| reference.point_at(s).map(|q| (s, q)))
        .collect();
    for &(s, q) in &cands {
        let th = reference.heading_at(s);
        let left = Vec2::new(-th.sin(), th.cos()) * offset;
        for p in [q + left, q - left] {
            if ok(p) {
                return Ok(Pose2D::new(p.x, p.y, th));
            }
        }
    }
    cands
        .iter()
        .find(|(_, q)| ok(*q))
        .map(|&(s, q)| Pose2D::new(q.x, q.y, reference.heading_at(s)))
        .ok_or(MidLevelError::NoGoalCandidate)
}

/// Nearest free cell center (8-connected BFS).
fn escape_point(map: &CostMap, p: Vec2) -> Option<Vec2> {
    let (i, j) = map.world_to_grid(p).ok()?;
    let (w, h) = (map.width(), map.height());
    let mut seen = vec![false; w * h];
    let mut q = VecDeque::from([(i, j)]);
    seen[j * w + i] = true;
    while let Some((ci, cj)) = q.pop_front() {
        if map.cell(ci, cj) < BLOCKED_THRESHOLD {
            return Some(map.grid_to_world(ci, cj));
        }
        for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
            let (ni, nj) = (ci as i64 + di, cj as i64 + dj);
            if map.in_bounds(ni, nj) && !seen[nj as usize * w + ni as usize] {
                seen[nj as usize * w + ni as usize] = true;
                q.push_back((ni as usize, nj as usize));
            }
        }
    }
    None
}

/// Member positions of each estimated group, looked up by track id.
pub fn group_positions(estimate: &GroupEstimate, tracks: &BTreeMap<u32, Vec2>) -> Vec<Vec<Vec2>> {
    estimate
        .groups
        .iter()
        .map(|g| g.member_ids.iter().filter_map(|id| tracks.get(id).copied()).collect::<Vec<_>>())
        .filter(|m| !m.is_empty())
        .collect()
}

/// Stateful mid-level planner: owns the reference and the current detour.
#[derive(Debug, Clone)]
pub struct MidLevelPlanner {
    social: SocialParams,
    bitstar: BitStarParams,
    reference: Path,
    seclusion: Option<(Path, Pose2D, bool)>,
    rng: ChaCha8Rng,
}

impl MidLevelPlanner {
    pub fn new(reference: Path, social: SocialParams, bitstar: BitStarParams, seed: u64) -> Self {
        MidLevelPlanner {
            social,
            bitstar,
            reference,
            seclusion: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn reference(&self) -> &Path {
        &self.reference
    }

    /// Social map used for conflict checks and the wider one used to plan.
    pub fn social_maps(&self, base: &CostMap, groups: &[Vec<Vec2>]) -> (Vec<SocialSpace>, CostMap, Vec<SocialSpace>, CostMap) {
        let build = |m: f64| -> Vec<SocialSpace> {
            groups.iter().filter_map(|g| SocialSpace::new(g, m).ok()).collect()
        };
        let check = build(self.social.margin);
        let plan = build(self.social.margin + self.social.planning_clearance);
        let c_plus = update_costmap(&check, base);
        let c_plan = update_costmap(&plan, base);
        (check, c_plus, plan, c_plan)
    }

    /// One decision: `groups` holds the member positions of each estimated group.
    pub fn cycle(&mut self, base: &CostMap, groups: &[Vec<Vec2>], robot: &Pose2D) -> Result<MidLevelOutput, MidLevelError> {
        let proj = self.reference.project(robot.position()).ok_or(MidLevelError::EmptyReference)?;
        if groups.is_empty() {
            self.seclusion = None;
            return Ok(self.kept(0));
        }
        let (_, c_plus, plan_spaces, c_plan) = self.social_maps(base, groups);
        let remaining = self.reference.tail_from(proj.arc);
        let Some((_, _, count)) = first_conflict(&remaining, &c_plus, 0.0) else {
            self.seclusion = None;
            return Ok(self.kept(0));
        };
        if let Some((path, goal, merged)) = &self.seclusion {
            let rest = path
                .project(robot.position())
                .map(|p| path.tail_from(p.arc))
                .filter(|r| !r.is_empty());
            let on_track = path.project(robot.position()).is_some_and(|p| p.distance < 1.0);
            if *merged && on_track && rest.as_ref().is_some_and(|r| !is_collided(r, &c_plus)) {
                return Ok(MidLevelOutput {
                    active: path.clone(),
                    flag: MidLevelFlag::Replanned,
                    goal: Some(*goal),
                    conflict_samples: count,
                    planned: false,
                });
            }
        }
        let goal = sample_new_goal(&self.reference, robot, &plan_spaces, &c_plan, self.social.goal_offset)?;
        let mut start = robot.position();
        let mut prefix = Vec::new();
        if c_plan.is_blocked_at(start) {
            prefix.push(start);
            start = escape_point(&c_plan, start).ok_or(MidLevelError::Trapped)?;
        }
        let res = plan_bitstar(start, goal.position(), &c_plan, &self.bitstar, &mut self.rng)?;
        prefix.extend(res.path.waypoints.iter().copied());
        let mut detour = Path {
            waypoints: prefix,
            cost: res.path.cost,
        };
        let gproj = self.reference.project(goal.position()).expect("non-empty reference");
        let tail = self.reference.tail_from(gproj.arc);
        let mut joined = detour.clone();
        joined.waypoints.extend(tail.waypoints.iter().copied());
        let merged = !is_collided(&Path::new(vec![goal.position(), tail.waypoints[0]]), &c_plus)
            && !is_collided(&tail, &c_plus);
        if merged {
            detour = joined;
        }
        let active = detour.densified(MAX_SEGMENT);
        self.seclusion = Some((active.clone(), goal, merged));
        Ok(MidLevelOutput {
            active,
            flag: MidLevelFlag::Replanned,
            goal: Some(goal),
            conflict_samples: count,
            planned: true,
        })
    }

    fn kept(&self, count: usize) -> MidLevelOutput {
        MidLevelOutput {
            active: self.reference.clone(),
            flag: MidLevelFlag::KeptReference,
            goal: None,
            conflict_samples: count,
            planned: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::LETHAL;

    fn room() -> CostMap {
        let mut m = CostMap::with_extent(20.0, 10.0, 0.05).unwrap();
        m.fill_rect(Vec2::new(0.0, 0.0), Vec2::new(20.0, 0.2));
        m.fill_rect(Vec2::new(0.0, 9.8), Vec2::new(20.0, 10.0));
        m.inflate(0.3, 0.5)
    }

    fn reference() -> Path {
        Path::new(vec![Vec2::new(2.0, 5.0), Vec2::new(18.0, 5.0)]).densified(MAX_SEGMENT)
    }

    fn queue(x: f64) -> Vec<Vec2> {
        (0..4).map(|k| Vec2::new(x, 2.75 + 1.5 * k as f64)).collect()
    }

    #[test]
    fn collision_checks() {
        let base = room();
        assert!(!is_collided(&reference(), &base));
        let s = SocialSpace::new(&queue(10.0), 0.5).unwrap();
        let c = update_costmap(std::slice::from_ref(&s), &base);
        assert!(is_collided(&reference(), &c));
    }

    #[test]
    fn tangent_path_hits_marked_boundary_cell() {
        let base = CostMap::with_extent(10.0, 10.0, 0.1).unwrap();
        let s = SocialSpace::new(&[Vec2::new(5.0, 5.0)], 1.0).unwrap();
        let c = update_costmap(std::slice::from_ref(&s), &base);
        // topmost marked cell in column x=5.05: the path runs along its upper edge region
        let (i, _) = c.world_to_grid(Vec2::new(5.05, 0.0)).unwrap();
        let top = (0..c.height()).filter(|j| c.cell(i, *j) >= BLOCKED_THRESHOLD).max().unwrap();
        let y = c.grid_to_world(i, top).y + 0.04;
        let tangent = Path::new(vec![Vec2::new(1.0, y), Vec2::new(9.0, y)]);
        let oracle = (0..=800).any(|k| c.is_blocked_at(Vec2::new(1.0 + 0.01 * k as f64, y)));
        assert!(oracle);
        assert_eq!(is_collided(&tangent, &c), oracle);
        let above = Path::new(vec![Vec2::new(1.0, y + 0.1), Vec2::new(9.0, y + 0.1)]);
        assert!(!is_collided(&above, &c));
    }

    #[test]
    fn goal_left_first_then_right() {
        let base = room();
        let spaces = vec![SocialSpace::new(&queue(10.0), 0.7).unwrap()];
        let c = update_costmap(&spaces, &base);
        let robot = Pose2D::new(2.0, 5.0, 0.0);
        let g = sample_new_goal(&reference(), &robot, &spaces, &c, 1.0).unwrap();
        assert!((g.y - 6.0).abs() < 1e-9, "{g:?}");
        assert!(g.x > 10.0 && g.x < 11.0);
        let mut walled = base.clone();
        walled.fill_rect(Vec2::new(10.0, 5.8), Vec2::new(20.0, 6.2));
        let c = update_costmap(&spaces, &walled);
        let g = sample_new_goal(&reference(), &robot, &spaces, &c, 1.0).unwrap();
        assert!((g.y - 4.0).abs() < 1e-9, "{g:?}");
    }

    #[test]
    fn goal_falls_back_to_resume_point() {
        // narrow corridor: lateral candidates are walls
        let mut base = CostMap::with_extent(20.0, 10.0, 0.05).unwrap();
        base.fill_rect(Vec2::new(0.0, 0.0), Vec2::new(20.0, 4.4));
        base.fill_rect(Vec2::new(0.0, 5.6), Vec2::new(20.0, 10.0));
        let spaces = vec![SocialSpace::new(&[Vec2::new(16.0, 5.0)], 0.5).unwrap()];
        let c = update_costmap(&spaces, &base);
        let r = reference();
        let robot = Pose2D::new(2.0, 5.0, 0.0);
        let g = sample_new_goal(&r, &robot, &spaces, &c, 1.0).unwrap();
        // exhaustive scan for the first free on-path point after the conflict
        let mut inside = false;
        let mut expected = None;
        for k in 0..=1600 {
            let p = Vec2::new(2.0 + 0.01 * k as f64, 5.0);
            let blocked = c.is_blocked_at(p) || point_in_region(p, &spaces);
            if blocked {
                inside = true;
            } else if inside {
                expected = Some(p);
                break;
            }
        }
        let e = expected.unwrap();
        assert!((g.position() - e).norm() <= 0.05, "{g:?} vs {e:?}");
        assert_eq!(g.y, 5.0);
        // conflict covering the path end: nothing left
        let spaces = vec![SocialSpace::new(&[Vec2::new(18.0, 5.0)], 0.5).unwrap()];
        let c = update_costmap(&spaces, &base);
        assert_eq!(sample_new_goal(&r, &robot, &spaces, &c, 1.0), Err(MidLevelError::NoGoalCandidate));
    }

    #[test]
    fn cycle_branches() {
        let base = room();
        let mut mp = MidLevelPlanner::new(reference(), SocialParams::default(), BitStarParams::default(), 7);
        let robot = Pose2D::new(2.0, 5.0, 0.0);
        let out = mp.cycle(&base, &[], &robot).unwrap();
        assert_eq!(out.flag, MidLevelFlag::KeptReference);
        assert_eq!(out.active, reference());

        let groups = vec![queue(10.0)];
        let out = mp.cycle(&base, &groups, &robot).unwrap();
        assert_eq!(out.flag, MidLevelFlag::Replanned);
        assert!(out.planned);
        let (spaces, c_plus, _, _) = mp.social_maps(&base, &groups);
        let dense = out.active.densified(0.05);
        assert!(dense.waypoints.iter().all(|p| !point_in_region(*p, &spaces)));
        assert!(!is_collided(&out.active, &c_plus));
        assert_eq!(out.active.waypoints.last(), reference().waypoints.last());

        // unchanged world: the detour is kept, not replanned
        let again = mp.cycle(&base, &groups, &robot).unwrap();
        assert!(!again.planned);
        assert_eq!(again.active, out.active);

        // group gone: back to the reference within one cycle
        let back = mp.cycle(&base, &[], &robot).unwrap();
        assert_eq!(back.flag, MidLevelFlag::KeptReference);
    }

    #[test]
    fn off_path_group_keeps_reference() {
        let base = room();
        let mut mp = MidLevelPlanner::new(reference(), SocialParams::default(), BitStarParams::default(), 7);
        let far = vec![vec![Vec2::new(10.0, 8.5), Vec2::new(11.0, 8.5)]];
        let out = mp.cycle(&base, &far, &Pose2D::new(2.0, 5.0, 0.0)).unwrap();
        assert_eq!(out.flag, MidLevelFlag::KeptReference);
    }

    #[test]
    fn robot_inside_planning_margin_escapes() {
        let base = room();
        let mut mp = MidLevelPlanner::new(reference(), SocialParams::default(), BitStarParams::default(), 7);
        let robot = Pose2D::new(9.4, 5.0, 0.0);
        let out = mp.cycle(&base, &[queue(10.0)], &robot).unwrap();
        assert_eq!(out.flag, MidLevelFlag::Replanned);
        assert_eq!(out.active.waypoints[0], robot.position());
    }

    #[test]
    fn lethal_cells_block_goal_candidates() {
        let mut base = room();
        let (i, j) = base.world_to_grid(Vec2::new(5.0, 5.0)).unwrap();
        base.set_cell(i, j, LETHAL);
        assert!(is_collided(&reference(), &base));
    }
}
