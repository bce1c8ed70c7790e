//! Scenario documents: one JSON file per scenario, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{load_map_file, Activity, CostMap, MapError, PedestrianState, Pose2D, SocialGroup, Vec2};
use crate::crowd::{min_pairwise_distance, ActivityScript, CrowdParams};
use crate::estimation::MockErrorModel;
use crate::local::NmpcParams;
use crate::midlevel::{BitStarParams, SocialParams};
use crate::perception::PerceptionParams;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedMap {
    pub width: f64,
    pub height: f64,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    /// Surround the map with a wall of this thickness (m); 0 disables.
    #[serde(default)]
    pub border: f64,
    #[serde(default)]
    pub walls: Vec<Rect>,
}

fn default_resolution() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MapSource {
    /// Path to a map sidecar JSON, relative to the scenario file.
    File(String),
    Generated(GeneratedMap),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupScript {
    pub group_id: u32,
    /// Ordered member ids (queue order for queues, photographer first for photos).
    pub members: Vec<u32>,
    pub script: ActivityScript,
}

/// Per-seed perturbation of the scripted layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variation {
    /// Uniform shift of each group, `[min, max]` in meters per axis.
    #[serde(default)]
    pub group_shift_x: [f64; 2],
    #[serde(default)]
    pub group_shift_y: [f64; 2],
    /// Rotate conversation circles by a uniform random angle.
    #[serde(default)]
    pub rotate_conversations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotParams {
    /// Footprint radius (m).
    pub radius: f64,
    /// Graded inflation band beyond the footprint (m).
    pub inflation_band: f64,
    /// Braking deceleration (m/s^2).
    pub max_decel: f64,
    /// Success radius around the goal (m).
    pub goal_tolerance: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        RobotParams {
            radius: 0.3,
            inflation_band: 0.5,
            max_decel: 1.0,
            goal_tolerance: 0.3,
        }
    }
}

fn default_dt() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Aggregation label; defaults to the first group's activity.
    #[serde(default)]
    pub archetype: Option<Activity>,
    pub map: MapSource,
    pub robot_start: Pose2D,
    pub robot_goal: Pose2D,
    #[serde(default)]
    pub pedestrians: Vec<PedestrianState>,
    #[serde(default)]
    pub groups: Vec<GroupScript>,
    #[serde(default)]
    pub variation: Option<Variation>,
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub time_limit: f64,
    #[serde(default)]
    pub robot: RobotParams,
    #[serde(default)]
    pub crowd: CrowdParams,
    #[serde(default)]
    pub perception: PerceptionParams,
    #[serde(default)]
    pub mock_model: MockErrorModel,
    #[serde(default)]
    pub social: SocialParams,
    #[serde(default)]
    pub bitstar: BitStarParams,
    #[serde(default)]
    pub nmpc: NmpcParams,
}

impl ScenarioConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    pub fn archetype(&self) -> Option<Activity> {
        self.archetype
            .or_else(|| self.groups.first().map(|g| g.script.activity()))
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.time_limit.is_finite() && self.time_limit > 0.0) {
            return bad("time_limit must be > 0".into());
        }
        let mut ids = BTreeSet::new();
        for p in &self.pedestrians {
            if !ids.insert(p.id) {
                return bad(format!("duplicate pedestrian id {}", p.id));
            }
            if !(p.position.iter().all(|v| v.is_finite()) && p.velocity.iter().all(|v| v.is_finite())) {
                return bad(format!("pedestrian {} has non-finite state", p.id));
            }
            if p.velocity.norm() > self.crowd.max_speed + 1e-9 {
                return bad(format!("pedestrian {} exceeds max speed", p.id));
            }
        }
        let mut grouped = BTreeSet::new();
        let mut gids = BTreeSet::new();
        for g in &self.groups {
            if !gids.insert(g.group_id) {
                return bad(format!("duplicate group id {}", g.group_id));
            }
            if g.members.is_empty() {
                return bad(format!("group {} has no members", g.group_id));
            }
            for m in &g.members {
                if !ids.contains(m) {
                    return bad(format!("group {} references unknown pedestrian {m}", g.group_id));
                }
                if !grouped.insert(*m) {
                    return bad(format!("pedestrian {m} belongs to two groups"));
                }
            }
            validate_script(&g.script).map_err(|m| ScenarioError::Invalid(format!("group {}: {m}", g.group_id)))?;
        }
        if min_pairwise_distance(&self.pedestrians) < 0.4 {
            return bad("pedestrians closer than 0.4 m at start".into());
        }
        self.mock_model
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.nmpc
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.bitstar
            .validate()
            .map_err(ScenarioError::Invalid)?;
        self.social.validate().map_err(ScenarioError::Invalid)?;
        if let MapSource::Generated(g) = &self.map {
            if !(g.width > 0.0 && g.height > 0.0 && g.resolution > 0.0 && g.border >= 0.0) {
                return bad("generated map dimensions must be positive".into());
            }
            if (g.width / g.resolution) * (g.height / g.resolution) > 16e6 {
                return bad("generated map too large".into());
            }
        }
        if let Some(v) = &self.variation {
            for r in [v.group_shift_x, v.group_shift_y] {
                if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                    return bad("variation ranges must be finite with min <= max".into());
                }
            }
        }
        Ok(())
    }

    /// Loads the static map. File paths resolve against `base_dir`.
    pub fn load_map(&self, base_dir: Option<&Path>) -> Result<CostMap, ScenarioError> {
        match &self.map {
            MapSource::File(rel) => {
                let path = base_dir.map(|b| b.join(rel)).unwrap_or_else(|| PathBuf::from(rel));
                Ok(load_map_file(&path)?)
            }
            MapSource::Generated(g) => {
                let mut map = CostMap::with_extent(g.width, g.height, g.resolution)?;
                if g.border > 0.0 {
                    let (w, h, b) = (g.width, g.height, g.border);
                    map.fill_rect(Vec2::new(0.0, 0.0), Vec2::new(w, b));
                    map.fill_rect(Vec2::new(0.0, h - b), Vec2::new(w, h));
                    map.fill_rect(Vec2::new(0.0, 0.0), Vec2::new(b, h));
                    map.fill_rect(Vec2::new(w - b, 0.0), Vec2::new(w, h));
                }
                for r in &g.walls {
                    map.fill_rect(r.min, r.max);
                }
                Ok(map)
            }
        }
    }

    /// Scripted grouping at episode start.
    pub fn ground_truth_groups(&self) -> Vec<SocialGroup> {
        self.groups
            .iter()
            .map(|g| SocialGroup::new(g.group_id, g.members.iter().copied(), g.script.activity()))
            .collect()
    }

    /// Concrete episode configuration for `seed`: the variation block is
    /// applied (and removed) and the seed recorded.
    pub fn instantiate(&self, seed: u64) -> ScenarioConfig {
        let mut out = self.clone();
        out.seed = seed;
        let Some(var) = out.variation.take() else {
            return out;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1_ab1e);
        let sample = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
            if r[1] > r[0] {
                rng.random_range(r[0]..r[1])
            } else {
                r[0]
            }
        };
        for g in &mut out.groups {
            let d = Vec2::new(sample(&mut rng, var.group_shift_x), sample(&mut rng, var.group_shift_y));
            let turn = if var.rotate_conversations {
                rng.random_range(0.0..std::f64::consts::TAU)
            } else {
                0.0
            };
            let center = match &g.script {
                ActivityScript::Conversation { center, .. } if turn != 0.0 => Some(*center),
                _ => None,
            };
            g.script.translate(d);
            for p in out.pedestrians.iter_mut().filter(|p| g.members.contains(&p.id)) {
                if let Some(c) = center {
                    let r = p.position - c;
                    let (s, co) = turn.sin_cos();
                    p.position = c + Vec2::new(co * r.x - s * r.y, s * r.x + co * r.y);
                }
                p.position += d;
            }
        }
        out
    }
}

fn validate_script(s: &ActivityScript) -> Result<(), String> {
    let pos = |v: f64, what: &str| {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(format!("{what} must be > 0"))
        }
    };
    match s {
        ActivityScript::Queue {
            spacing,
            advance_period,
            depart_interval,
            ..
        } => {
            pos(*spacing, "spacing")?;
            pos(*advance_period, "advance_period")?;
            if let Some(d) = depart_interval {
                pos(*d, "depart_interval")?;
            }
        }
        ActivityScript::Conversation { center, radius } => {
            pos(*radius, "radius")?;
            if !center.iter().all(|v| v.is_finite()) {
                return Err("center must be finite".into());
            }
        }
        ActivityScript::Photography { gap_width, .. } => pos(*gap_width, "gap_width")?,
        ActivityScript::Walking { waypoints, speed } => {
            pos(*speed, "speed")?;
            if waypoints.iter().any(|w| !w.iter().all(|v| v.is_finite())) {
                return Err("waypoints must be finite".into());
            }
        }
    }
    Ok(())
}
