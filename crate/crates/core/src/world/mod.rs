//! Geometric and kinematic state shared by every other module.

mod costmap;
mod mapfile;
mod scenario;

use std::collections::BTreeSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use costmap::{CostMap, MapError, BLOCKED_THRESHOLD, FREE, LETHAL, SOCIAL};
pub use mapfile::{load_map_file, parse_map, MapMetadata};
pub use scenario::{
    GeneratedMap, GroupScript, MapSource, Rect, RobotParams, ScenarioConfig, ScenarioError,
    Variation,
};

/// Planar vector in meters (or m/s for velocities).
pub type Vec2 = nalgebra::Vector2<f64>;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    x: f64,
    y: f64,
    #[serde(default)]
    theta: f64,
}

impl TryFrom<PoseRepr> for Pose2D {
    type Error = String;

    fn try_from(r: PoseRepr) -> Result<Self, Self::Error> {
        if !(r.x.is_finite() && r.y.is_finite() && r.theta.is_finite()) {
            return Err("pose components must be finite".into());
        }
        Ok(Pose2D::new(r.x, r.y, r.theta))
    }
}

impl From<Pose2D> for PoseRepr {
    fn from(p: Pose2D) -> Self {
        PoseRepr {
            x: p.x,
            y: p.y,
            theta: p.theta,
        }
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2D {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn heading(&self) -> Vec2 {
        Vec2::new(self.theta.cos(), self.theta.sin())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub pose: Pose2D,
    pub v: f64,
    pub omega: f64,
}

impl RobotState {
    pub fn at_rest(pose: Pose2D) -> Self {
        RobotState {
            pose,
            v: 0.0,
            omega: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub omega: f64,
}

impl ControlInput {
    pub fn new(v: f64, omega: f64) -> Self {
        ControlInput { v, omega }
    }

    /// Clamps into the box `|v| <= v_max`, `|omega| <= omega_max`.
    pub fn clamped(self, v_max: f64, omega_max: f64) -> Self {
        ControlInput {
            v: self.v.clamp(-v_max, v_max),
            omega: self.omega.clamp(-omega_max, omega_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PedestrianState {
    pub id: u32,
    pub position: Vec2,
    #[serde(default = "zero_vec")]
    pub velocity: Vec2,
    #[serde(default)]
    pub heading: f64,
}

fn zero_vec() -> Vec2 {
    Vec2::zeros()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Queue,
    Conversation,
    Photography,
    Walking,
}

impl Activity {
    pub const ALL: [Activity; 4] = [
        Activity::Queue,
        Activity::Conversation,
        Activity::Photography,
        Activity::Walking,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Activity::Queue => "queue",
            Activity::Conversation => "conversation",
            Activity::Photography => "photography",
            Activity::Walking => "walking",
        }
    }

    /// Lenient label parsing for free-form model output.
    pub fn from_label(label: &str) -> Option<Activity> {
        let l = label.trim().to_ascii_lowercase();
        let act = if l.starts_with("queu") || l.contains("line") {
            Activity::Queue
        } else if l.starts_with("conver") || l.starts_with("chat") || l.starts_with("talk") {
            Activity::Conversation
        } else if l.starts_with("photo") || l.contains("picture") {
            Activity::Photography
        } else if l.starts_with("walk") {
            Activity::Walking
        } else {
            return None;
        };
        Some(act)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialGroup {
    pub group_id: u32,
    pub member_ids: BTreeSet<u32>,
    pub activity: Activity,
}

impl SocialGroup {
    pub fn new(group_id: u32, members: impl IntoIterator<Item = u32>, activity: Activity) -> Self {
        SocialGroup {
            group_id,
            member_ids: members.into_iter().collect(),
            activity,
        }
    }
}

/// True when no pedestrian id appears in two groups.
pub fn groups_disjoint(groups: &[SocialGroup]) -> bool {
    let mut seen = BTreeSet::new();
    groups
        .iter()
        .flat_map(|g| g.member_ids.iter())
        .all(|id| seen.insert(*id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedState {
    pub t: f64,
    pub state: RobotState,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TimedState>,
}

impl Trajectory {
    pub fn push(&mut self, t: f64, state: RobotState) {
        debug_assert!(self.samples.last().is_none_or(|s| t > s.t));
        self.samples.push(TimedState { t, state });
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.samples.iter().map(|s| s.state.pose.position()).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((normalize_angle(0.25)) == 0.25);
    }

    proptest! {
        #[test]
        fn normalized_angle_in_half_open_interval(a in -100.0f64..100.0) {
            let n = normalize_angle(a);
            prop_assert!(n > -PI && n <= PI);
            let diff = (a - n) / (2.0 * PI);
            prop_assert!((diff - diff.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn pose_json_normalizes_and_rejects_unknown_keys() {
        let p: Pose2D = serde_json::from_str(r#"{"x":1,"y":2,"theta":7.0}"#).unwrap();
        assert!((p.theta - normalize_angle(7.0)).abs() < 1e-15);
        assert!(serde_json::from_str::<Pose2D>(r#"{"x":1,"y":2,"z":0}"#).is_err());
    }

    #[test]
    fn activity_labels() {
        assert_eq!(Activity::from_label("Queuing"), Some(Activity::Queue));
        assert_eq!(Activity::from_label("chatting"), Some(Activity::Conversation));
        assert_eq!(Activity::from_label("taking pictures"), Some(Activity::Photography));
        assert_eq!(Activity::from_label("walking"), Some(Activity::Walking));
        assert_eq!(Activity::from_label("dancing"), None);
    }

    #[test]
    fn disjointness_check() {
        let a = SocialGroup::new(0, [1, 2], Activity::Queue);
        let b = SocialGroup::new(1, [3], Activity::Walking);
        let c = SocialGroup::new(2, [2, 4], Activity::Walking);
        assert!(groups_disjoint(&[a.clone(), b]));
        assert!(!groups_disjoint(&[a, c]));
    }
}
