//! Batch Informed Trees over a 2D cost map. Path length is the objective;
//! cells at or above the blocking threshold are obstacles.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::{Distribution, UnitDisc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::global::Path;
use crate::world::{CostMap, Vec2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BitStarParams {
    pub batches: usize,
    pub samples_per_batch: usize,
    /// Multiplier on the minimal asymptotically optimal connection radius.
    pub rewire_factor: f64,
}

impl Default for BitStarParams {
    fn default() -> Self {
        BitStarParams {
            batches: 5,
            samples_per_batch: 200,
            rewire_factor: 1.1,
        }
    }
}

impl BitStarParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.batches == 0 || self.samples_per_batch == 0 {
            return Err("bitstar budget must be positive".into());
        }
        if !(self.rewire_factor.is_finite() && self.rewire_factor >= 1.0) {
            return Err("bitstar rewire_factor must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BitStarError {
    #[error("start is blocked")]
    StartBlocked,
    #[error("goal is blocked")]
    GoalBlocked,
    #[error("no solution within the batch budget")]
    NoSolution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitStarResult {
    pub path: Path,
    /// Best solution cost after each batch (infinite until one is found).
    pub batch_costs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    pos: Vec2,
    in_tree: bool,
    dead: bool,
    parent: Option<usize>,
    children: Vec<usize>,
    g: f64,
    /// Vertex existed before the current batch.
    old: bool,
}

#[derive(PartialEq)]
struct Keyed<T> {
    key: f64,
    tie: f64,
    item: T,
}

impl<T: PartialEq> Eq for Keyed<T> {}

impl<T: PartialEq> Ord for Keyed<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.total_cmp(&self.key).then(other.tie.total_cmp(&self.tie))
    }
}

impl<T: PartialEq> PartialOrd for Keyed<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Planner<'a> {
    map: &'a CostMap,
    start: Vec2,
    goal: Vec2,
    nodes: Vec<Node>,
    best: f64,
    step: f64,
    lo: Vec2,
    hi: Vec2,
}

const START: usize = 0;
const GOAL: usize = 1;

impl Planner<'_> {
    fn g_hat(&self, p: Vec2) -> f64 {
        (p - self.start).norm()
    }

    fn h_hat(&self, p: Vec2) -> f64 {
        (p - self.goal).norm()
    }

    fn f_hat(&self, p: Vec2) -> f64 {
        self.g_hat(p) + self.h_hat(p)
    }

    fn edge_free(&self, a: Vec2, b: Vec2) -> bool {
        self.map.segment_free(a, b, self.step)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Option<Vec2> {
        let p = if self.best.is_finite() {
            let c_min = (self.goal - self.start).norm();
            let major = self.best / 2.0;
            let minor = (self.best * self.best - c_min * c_min).max(0.0).sqrt() / 2.0;
            let [u, v]: [f64; 2] = UnitDisc.sample(rng);
            let axis = if c_min > 0.0 {
                (self.goal - self.start) / c_min
            } else {
                Vec2::new(1.0, 0.0)
            };
            let normal = Vec2::new(-axis.y, axis.x);
            (self.start + self.goal) / 2.0 + axis * (u * major) + normal * (v * minor)
        } else {
            Vec2::new(rng.random_range(self.lo.x..self.hi.x), rng.random_range(self.lo.y..self.hi.y))
        };
        let inside = p.x >= self.lo.x && p.x < self.hi.x && p.y >= self.lo.y && p.y < self.hi.y;
        (inside && !self.map.is_blocked_at(p)).then_some(p)
    }

    /// Lebesgue measure of the region samples are drawn from.
    fn sample_measure(&self) -> f64 {
        let box_area = (self.hi.x - self.lo.x) * (self.hi.y - self.lo.y);
        if self.best.is_finite() {
            let c_min = (self.goal - self.start).norm();
            let minor = (self.best * self.best - c_min * c_min).max(0.0).sqrt() / 2.0;
            (std::f64::consts::PI * self.best / 2.0 * minor).min(box_area)
        } else {
            box_area
        }
    }

    fn radius(&self, eta: f64) -> f64 {
        let q = self.nodes.iter().filter(|n| !n.dead).count().max(2) as f64;
        let lambda = self.sample_measure();
        2.0 * eta * ((1.0 + 0.5) * (lambda / std::f64::consts::PI) * (q.ln() / q)).sqrt()
    }

    fn prune(&mut self) {
        let c = self.best;
        for k in 2..self.nodes.len() {
            let f = self.f_hat(self.nodes[k].pos);
            let n = &mut self.nodes[k];
            if n.dead {
                continue;
            }
            if (!n.in_tree && f >= c) || (n.in_tree && f > c) {
                n.dead = true;
            }
        }
        // keep only vertices still reachable through live parents
        let mut reach = vec![false; self.nodes.len()];
        let mut stack = vec![START];
        reach[START] = true;
        while let Some(v) = stack.pop() {
            let kids = self.nodes[v].children.clone();
            for w in kids {
                if !self.nodes[w].dead && !reach[w] {
                    reach[w] = true;
                    stack.push(w);
                }
            }
        }
        for k in 0..self.nodes.len() {
            let n = &mut self.nodes[k];
            n.children.retain(|w| reach[*w]);
            if n.in_tree && !reach[k] {
                n.in_tree = false;
                n.parent = None;
                n.g = f64::INFINITY;
                n.children.clear();
                if self.f_hat(self.nodes[k].pos) >= c {
                    self.nodes[k].dead = true;
                }
            }
        }
    }

    fn set_g_subtree(&mut self, root: usize) {
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            let kids = self.nodes[v].children.clone();
            for w in kids {
                let g = self.nodes[v].g + (self.nodes[w].pos - self.nodes[v].pos).norm();
                self.nodes[w].g = g;
                stack.push(w);
            }
        }
    }

    fn solve<R: Rng>(&mut self, params: &BitStarParams, rng: &mut R) -> Vec<f64> {
        let mut batch_costs = Vec::with_capacity(params.batches);
        for _ in 0..params.batches {
            if self.best.is_finite() {
                self.prune();
            }
            for n in &mut self.nodes {
                n.old = n.in_tree;
            }
            let mut added = 0;
            let mut attempts = 0;
            while added < params.samples_per_batch && attempts < params.samples_per_batch * 20 {
                attempts += 1;
                if let Some(p) = self.sample(rng) {
                    self.nodes.push(Node {
                        pos: p,
                        in_tree: false,
                        dead: false,
                        parent: None,
                        children: Vec::new(),
                        g: f64::INFINITY,
                        old: false,
                    });
                    added += 1;
                }
            }
            let r = self.radius(params.rewire_factor);
            self.run_batch(r);
            batch_costs.push(self.best);
        }
        batch_costs
    }

    fn run_batch(&mut self, r: f64) {
        let mut qv: BinaryHeap<Keyed<usize>> = BinaryHeap::new();
        let mut in_qv = vec![false; self.nodes.len()];
        for (k, n) in self.nodes.iter().enumerate() {
            if n.in_tree && !n.dead {
                qv.push(Keyed {
                    key: n.g + self.h_hat(n.pos),
                    tie: n.g,
                    item: k,
                });
                in_qv[k] = true;
            }
        }
        let mut qe: BinaryHeap<Keyed<(usize, usize)>> = BinaryHeap::new();
        loop {
            // expand vertices while they could yield better edges than the best queued
            while let Some(top) = qv.peek() {
                if let Some(e) = qe.peek() {
                    if top.key > e.key {
                        break;
                    }
                }
                let v = qv.pop().expect("peeked").item;
                if !in_qv[v] {
                    continue;
                }
                in_qv[v] = false;
                self.expand(v, r, &mut qe);
            }
            let Some(Keyed { item: (v, x), .. }) = qe.pop() else {
                break;
            };
            let (pv, px) = (self.nodes[v].pos, self.nodes[x].pos);
            let c_hat = (px - pv).norm();
            let gv = self.nodes[v].g;
            if gv + c_hat + self.h_hat(px) >= self.best {
                // the queue is ordered, nothing left can help
                break;
            }
            if self.nodes[x].in_tree && self.nodes[x].g <= gv + c_hat {
                continue;
            }
            if self.g_hat(pv) + c_hat + self.h_hat(px) >= self.best || !self.edge_free(pv, px) {
                continue;
            }
            let cand = gv + c_hat;
            if cand >= self.nodes[x].g {
                continue;
            }
            if self.nodes[x].in_tree {
                if let Some(old) = self.nodes[x].parent {
                    self.nodes[old].children.retain(|c| *c != x);
                }
            } else {
                self.nodes[x].in_tree = true;
                in_qv[x] = true;
            }
            self.nodes[x].parent = Some(v);
            self.nodes[x].g = cand;
            self.nodes[v].children.push(x);
            self.set_g_subtree(x);
            if in_qv[x] {
                qv.push(Keyed {
                    key: cand + self.h_hat(px),
                    tie: cand,
                    item: x,
                });
            }
            if self.nodes[GOAL].in_tree {
                self.best = self.best.min(self.nodes[GOAL].g);
            }
        }
    }

    fn expand(&self, v: usize, r: f64, qe: &mut BinaryHeap<Keyed<(usize, usize)>>) {
        let pv = self.nodes[v].pos;
        let gv = self.nodes[v].g;
        let new_vertex = !self.nodes[v].old;
        for (k, n) in self.nodes.iter().enumerate() {
            if k == v || n.dead {
                continue;
            }
            let d = (n.pos - pv).norm();
            if d > r {
                continue;
            }
            let key = gv + d + self.h_hat(n.pos);
            if n.in_tree {
                // rewiring candidates only from vertices new to this batch
                if !new_vertex || n.parent == Some(v) || self.nodes[v].parent == Some(k) {
                    continue;
                }
                if self.g_hat(pv) + d + self.h_hat(n.pos) < self.best && gv + d < n.g {
                    qe.push(Keyed {
                        key,
                        tie: gv + d,
                        item: (v, k),
                    });
                }
            } else if self.g_hat(pv) + d + self.h_hat(n.pos) < self.best {
                qe.push(Keyed {
                    key,
                    tie: gv + d,
                    item: (v, k),
                });
            }
        }
    }
}

/// Plans from `start` to `goal` on `map`, sampling within the map bounds.
pub fn plan_bitstar<R: Rng>(
    start: Vec2,
    goal: Vec2,
    map: &CostMap,
    params: &BitStarParams,
    rng: &mut R,
) -> Result<BitStarResult, BitStarError> {
    if map.is_blocked_at(start) {
        return Err(BitStarError::StartBlocked);
    }
    if map.is_blocked_at(goal) {
        return Err(BitStarError::GoalBlocked);
    }
    let (lo, hi) = map.bounds();
    let node = |pos: Vec2, tree: bool| Node {
        pos,
        in_tree: tree,
        dead: false,
        parent: None,
        children: Vec::new(),
        g: if tree { 0.0 } else { f64::INFINITY },
        old: false,
    };
    let mut p = Planner {
        map,
        start,
        goal,
        nodes: vec![node(start, true), node(goal, false)],
        best: f64::INFINITY,
        step: map.resolution() / 2.0,
        lo,
        hi,
    };
    let batch_costs = p.solve(params, rng);
    if !p.best.is_finite() {
        return Err(BitStarError::NoSolution);
    }
    let mut pts = vec![p.nodes[GOAL].pos];
    let mut k = GOAL;
    while let Some(par) = p.nodes[k].parent {
        pts.push(p.nodes[par].pos);
        k = par;
    }
    pts.reverse();
    Ok(BitStarResult {
        path: Path {
            waypoints: pts,
            cost: p.best,
        },
        batch_costs,
    })
}
