//! Scripted pedestrian crowd: queues, conversations, photo sessions and
//! walking groups, with a bounded repulsion from the robot and from
//! pedestrians outside one's own group.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::world::{normalize_angle, Activity, PedestrianState, Pose2D, SocialGroup, Vec2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "activity", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActivityScript {
    /// Members stand behind `anchor` (the head position, facing the service
    /// point) at `spacing`; when the head leaves, everyone moves up one slot
    /// over `advance_period` seconds.
    Queue {
        anchor: Pose2D,
        spacing: f64,
        advance_period: f64,
        /// Head departs every `depart_interval` seconds; never when absent.
        #[serde(default)]
        depart_interval: Option<f64>,
    },
    Conversation { center: Vec2, radius: f64 },
    /// The first member is the photographer; the rest are subjects standing
    /// on a line `gap_width` meters in front of them.
    Photography {
        photographer: Pose2D,
        #[serde(default = "default_gap")]
        gap_width: f64,
    },
    /// The group keeps its initial formation around a virtual leader that
    /// starts at the group centroid and follows the waypoints.
    Walking { waypoints: Vec<Vec2>, speed: f64 },
}

fn default_gap() -> f64 {
    3.0
}

impl ActivityScript {
    pub fn activity(&self) -> Activity {
        match self {
            ActivityScript::Queue { .. } => Activity::Queue,
            ActivityScript::Conversation { .. } => Activity::Conversation,
            ActivityScript::Photography { .. } => Activity::Photography,
            ActivityScript::Walking { .. } => Activity::Walking,
        }
    }

    /// Moves every positional parameter by `d`.
    pub fn translate(&mut self, d: Vec2) {
        match self {
            ActivityScript::Queue { anchor, .. } => *anchor = Pose2D::new(anchor.x + d.x, anchor.y + d.y, anchor.theta),
            ActivityScript::Conversation { center, .. } => *center += d,
            ActivityScript::Photography { photographer, .. } => {
                *photographer = Pose2D::new(photographer.x + d.x, photographer.y + d.y, photographer.theta)
            }
            ActivityScript::Walking { waypoints, .. } => waypoints.iter_mut().for_each(|w| *w += d),
        }
    }

    /// Initial member positions the script would place for `n` members.
    pub fn layout(&self, n: usize) -> Vec<Vec2> {
        match self {
            ActivityScript::Queue { anchor, spacing, .. } => (0..n)
                .map(|k| anchor.position() - anchor.heading() * (*spacing * k as f64))
                .collect(),
            ActivityScript::Conversation { center, radius } => (0..n)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / n as f64;
                    center + Vec2::new(a.cos(), a.sin()) * *radius
                })
                .collect(),
            ActivityScript::Photography { photographer, gap_width } => {
                let mut out = vec![photographer.position()];
                let subjects = n.saturating_sub(1);
                let line_center = photographer.position() + photographer.heading() * *gap_width;
                let lateral = Vec2::new(-photographer.theta.sin(), photographer.theta.cos());
                for k in 0..subjects {
                    let off = (k as f64 - (subjects as f64 - 1.0) / 2.0) * 0.8;
                    out.push(line_center + lateral * off);
                }
                out.truncate(n);
                out
            }
            ActivityScript::Walking { waypoints, .. } => {
                let start = waypoints.first().copied().unwrap_or_else(Vec2::zeros);
                (0..n)
                    .map(|k| start + Vec2::new(0.0, 1.0) * (k as f64 - (n as f64 - 1.0) / 2.0))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrowdParams {
    /// m/s
    pub max_speed: f64,
    /// Repulsion acts only below this distance (m).
    pub repulsion_cutoff: f64,
    /// Repulsive speed at zero distance (m/s).
    pub repulsion_gain: f64,
    /// Speed at which static members return to their spot after being pushed.
    pub restore_speed: f64,
}

impl Default for CrowdParams {
    fn default() -> Self {
        CrowdParams {
            max_speed: 1.5,
            repulsion_cutoff: 1.0,
            repulsion_gain: 0.5,
            restore_speed: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct GroupRuntime {
    group_id: u32,
    /// Current members, in queue rank order for queues.
    members: Vec<u32>,
    script: ActivityScript,
    anchors: BTreeMap<u32, Vec2>,
    offsets: BTreeMap<u32, Vec2>,
    leader: Vec2,
    waypoint: usize,
    departures: usize,
}

/// Lockstep pedestrian simulator. Owns all pedestrian state.
#[derive(Debug, Clone)]
pub struct CrowdSim {
    params: CrowdParams,
    peds: Vec<PedestrianState>,
    groups: Vec<GroupRuntime>,
    /// Pedestrian id -> index into `groups`.
    membership: BTreeMap<u32, usize>,
    /// Desired velocity of ungrouped pedestrians.
    cruise: BTreeMap<u32, Vec2>,
    time: f64,
}

impl CrowdSim {
    /// `groups` pairs a group id and its ordered member ids with a script.
    pub fn new(
        pedestrians: Vec<PedestrianState>,
        groups: &[(u32, Vec<u32>, ActivityScript)],
        params: CrowdParams,
    ) -> Self {
        let pos: BTreeMap<u32, Vec2> = pedestrians.iter().map(|p| (p.id, p.position)).collect();
        let mut membership = BTreeMap::new();
        let mut runtimes = Vec::new();
        for (gi, (group_id, members, script)) in groups.iter().enumerate() {
            let members: Vec<u32> = members.iter().copied().filter(|id| pos.contains_key(id)).collect();
            let anchors: BTreeMap<u32, Vec2> = members.iter().map(|id| (*id, pos[id])).collect();
            let centroid = if members.is_empty() {
                Vec2::zeros()
            } else {
                anchors.values().sum::<Vec2>() / members.len() as f64
            };
            let offsets = anchors.iter().map(|(id, p)| (*id, p - centroid)).collect();
            for id in &members {
                membership.insert(*id, gi);
            }
            runtimes.push(GroupRuntime {
                group_id: *group_id,
                members,
                script: script.clone(),
                anchors,
                offsets,
                leader: centroid,
                waypoint: 0,
                departures: 0,
            });
        }
        let cruise = pedestrians
            .iter()
            .filter(|p| !membership.contains_key(&p.id))
            .map(|p| (p.id, p.velocity))
            .collect();
        let mut sim = CrowdSim {
            params,
            peds: pedestrians,
            groups: runtimes,
            membership,
            cruise,
            time: 0.0,
        };
        let headings: Vec<Option<f64>> = sim.peds.iter().map(|p| sim.script_heading(p)).collect();
        for (p, h) in sim.peds.iter_mut().zip(headings) {
            if let Some(h) = h {
                p.heading = h;
            }
        }
        sim
    }

    pub fn pedestrians(&self) -> &[PedestrianState] {
        &self.peds
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Current scripted grouping over the pedestrians still in the scene.
    pub fn ground_truth_groups(&self) -> Vec<SocialGroup> {
        self.groups
            .iter()
            .filter(|g| !g.members.is_empty())
            .map(|g| SocialGroup::new(g.group_id, g.members.iter().copied(), g.script.activity()))
            .collect()
    }

    /// Advances every pedestrian by `dt` seconds. `robot` is the robot position, if any.
    pub fn step(&mut self, robot: Option<Vec2>, dt: f64) {
        assert!(dt > 0.0, "dt must be positive");
        self.handle_departures();
        self.advance_leaders(dt);

        let snapshot = self.peds.clone();
        let p = &self.params;
        let mut next = Vec::with_capacity(snapshot.len());
        for ped in &snapshot {
            let desired = self.desired_velocity(ped, dt);
            let mut rep = Vec2::zeros();
            let mut push = |src: Vec2| {
                let d = ped.position - src;
                let dist = d.norm();
                if dist < p.repulsion_cutoff && dist > 1e-9 {
                    rep += d / dist * (p.repulsion_gain * (1.0 - dist / p.repulsion_cutoff));
                }
            };
            if let Some(r) = robot {
                push(r);
            }
            let own = self.membership.get(&ped.id);
            for other in &snapshot {
                if other.id == ped.id || (own.is_some() && self.membership.get(&other.id) == own) {
                    continue;
                }
                push(other.position);
            }
            let mut v = desired + rep;
            let speed = v.norm();
            if speed > p.max_speed {
                v *= p.max_speed / speed;
            }
            let mut moved = *ped;
            moved.position += v * dt;
            moved.velocity = v;
            moved.heading = if v.norm() > 0.05 {
                v.y.atan2(v.x)
            } else {
                self.script_heading(&moved).unwrap_or(ped.heading)
            };
            next.push(moved);
        }
        self.peds = next;
        self.time += dt;
    }

    fn handle_departures(&mut self) {
        let mut removed = Vec::new();
        for g in &mut self.groups {
            if let ActivityScript::Queue {
                depart_interval: Some(every),
                ..
            } = g.script
            {
                if every <= 0.0 || g.members.is_empty() {
                    continue;
                }
                let due = (self.time / every + 1e-9).floor() as usize;
                while g.departures < due && !g.members.is_empty() {
                    removed.push(g.members.remove(0));
                    g.departures += 1;
                }
            }
        }
        for id in removed {
            self.peds.retain(|p| p.id != id);
            self.membership.remove(&id);
        }
    }

    fn advance_leaders(&mut self, dt: f64) {
        for g in &mut self.groups {
            if let ActivityScript::Walking { waypoints, speed } = &g.script {
                let mut budget = speed * dt;
                while budget > 0.0 && g.waypoint < waypoints.len() {
                    let to = waypoints[g.waypoint] - g.leader;
                    let d = to.norm();
                    if d <= budget {
                        g.leader = waypoints[g.waypoint];
                        budget -= d;
                        g.waypoint += 1;
                    } else {
                        g.leader += to * (budget / d);
                        budget = 0.0;
                    }
                }
            }
        }
    }

    fn desired_velocity(&self, ped: &PedestrianState, dt: f64) -> Vec2 {
        let Some(&gi) = self.membership.get(&ped.id) else {
            return self.cruise.get(&ped.id).copied().unwrap_or_else(Vec2::zeros);
        };
        let g = &self.groups[gi];
        let (target, cap) = match &g.script {
            ActivityScript::Queue {
                anchor,
                spacing,
                advance_period,
                ..
            } => {
                let rank = g.members.iter().position(|m| *m == ped.id).unwrap_or(0);
                let slot = anchor.position() - anchor.heading() * (spacing * rank as f64);
                (slot, spacing / advance_period.max(1e-6))
            }
            ActivityScript::Conversation { .. } | ActivityScript::Photography { .. } => {
                (g.anchors[&ped.id], self.params.restore_speed)
            }
            ActivityScript::Walking { .. } => (g.leader + g.offsets[&ped.id], self.params.max_speed),
        };
        let mut v = (target - ped.position) / dt;
        let n = v.norm();
        if n > cap {
            v *= cap / n;
        }
        v
    }

    fn script_heading(&self, ped: &PedestrianState) -> Option<f64> {
        let g = &self.groups[*self.membership.get(&ped.id)?];
        let face = |to: Vec2| {
            let d = to - ped.position;
            (d.norm() > 1e-9).then(|| d.y.atan2(d.x))
        };
        match &g.script {
            ActivityScript::Queue { anchor, .. } => Some(anchor.theta),
            ActivityScript::Conversation { center, .. } => face(*center),
            ActivityScript::Photography { photographer, .. } => {
                if g.members.first() == Some(&ped.id) {
                    Some(photographer.theta)
                } else {
                    face(photographer.position())
                }
            }
            ActivityScript::Walking { .. } => Some(normalize_angle(ped.heading)),
        }
    }
}

/// Minimum pairwise distance between pedestrians (infinite for fewer than two).
pub fn min_pairwise_distance(peds: &[PedestrianState]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in peds.iter().enumerate() {
        for b in &peds[i + 1..] {
            best = best.min((a.position - b.position).norm());
        }
    }
    best
}
