//! Social-navigation and path-quality metrics over a finished episode,
//! computed against ground-truth pedestrians and groups.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{convex_hull, segment_distance, ConvexHull};
use crate::world::{normalize_angle, PedestrianState, Pose2D, SocialGroup, Vec2};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("series lengths differ: {0}")]
    Misaligned(String),
    #[error("trajectory has {0} samples, at least 4 are needed")]
    TooShort(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Rule deciding whether a nearby robot disturbs a person.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndividualRule {
    /// Robot lies within 90 degrees of the person's heading.
    #[default]
    Frontal,
    /// Robot yaw within 90 degrees of the person-to-robot bearing.
    YawDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub individual_radius: f64,
    pub individual_rule: IndividualRule,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            individual_radius: 1.2,
            individual_rule: IndividualRule::Frontal,
        }
    }
}

/// Everything the metrics need, sampled once per control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub dt: f64,
    pub robot: Vec<Pose2D>,
    pub pedestrians: Vec<Vec<PedestrianState>>,
    pub groups: Vec<Vec<SocialGroup>>,
    /// Planned path used for angular deviation.
    pub reference: Vec<Vec2>,
    pub goal: Vec2,
    pub goal_tolerance: f64,
    pub robot_radius: f64,
}

impl EpisodeRecord {
    pub fn check(&self) -> Result<(), MetricsError> {
        let n = self.robot.len();
        if self.pedestrians.len() != n || self.groups.len() != n {
            return Err(MetricsError::Misaligned(format!(
                "robot {n}, pedestrians {}, groups {}",
                self.pedestrians.len(),
                self.groups.len()
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.robot.len() as f64 * self.dt
    }

    /// Hulls of each group at tick `k`, from the members present.
    pub fn hulls_at(&self, k: usize) -> Vec<ConvexHull> {
        group_hulls(&self.pedestrians[k], &self.groups[k])
    }
}

pub fn group_hulls(peds: &[PedestrianState], groups: &[SocialGroup]) -> Vec<ConvexHull> {
    groups
        .iter()
        .filter_map(|g| {
            let pts: Vec<Vec2> = peds.iter().filter(|p| g.member_ids.contains(&p.id)).map(|p| p.position).collect();
            if pts.len() < 2 {
                return None;
            }
            convex_hull(&pts).ok()
        })
        .collect()
}

pub fn disturbs_individual(robot: &Pose2D, ped: &PedestrianState, opts: &MetricOptions) -> bool {
    let to_robot = robot.position() - ped.position;
    let d = to_robot.norm();
    if d >= opts.individual_radius {
        return false;
    }
    if d == 0.0 {
        return true;
    }
    let bearing = to_robot.y.atan2(to_robot.x);
    let diff = match opts.individual_rule {
        IndividualRule::Frontal => bearing - ped.heading,
        IndividualRule::YawDifference => robot.theta - bearing,
    };
    normalize_angle(diff).abs() < std::f64::consts::FRAC_PI_2
}

/// Hulls at least a robot diameter wide count plain containment. Thinner
/// ones (lines of people, two-person groups) count footprint overlap, so a
/// robot slipping through a gap registers even between samples of a sliver.
pub fn inside_any_group(p: Vec2, hulls: &[ConvexHull], robot_radius: f64) -> bool {
    hulls.iter().any(|h| {
        if h.width() >= 2.0 * robot_radius {
            h.contains(p)
        } else {
            h.contains(p) || h.boundary_distance(p) <= robot_radius
        }
    })
}

/// Signed distance to the nearest hull, `None` without groups.
pub fn comfort_at(p: Vec2, hulls: &[ConvexHull]) -> Option<f64> {
    hulls.iter().map(|h| h.signed_distance(p)).reduce(f64::min)
}

pub fn time_disturbing_individual(record: &EpisodeRecord, opts: &MetricOptions) -> f64 {
    record
        .robot
        .iter()
        .zip(&record.pedestrians)
        .filter(|(r, peds)| peds.iter().any(|p| disturbs_individual(r, p, opts)))
        .count() as f64
        * record.dt
}

pub fn time_disturbing_group(record: &EpisodeRecord) -> f64 {
    (0..record.robot.len())
        .filter(|&k| inside_any_group(record.robot[k].position(), &record.hulls_at(k), record.robot_radius))
        .count() as f64
        * record.dt
}

/// Time average over ticks where at least one group exists.
pub fn comfort_distance(record: &EpisodeRecord) -> Option<f64> {
    let vals: Vec<f64> = (0..record.robot.len())
        .filter_map(|k| comfort_at(record.robot[k].position(), &record.hulls_at(k)))
        .collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathQuality {
    pub roughness: f64,
    pub curvature: f64,
    pub jerk: f64,
    pub angular_deviation: f64,
    pub velocity: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Heading error against the nearest reference segment.
fn angular_deviation(pose: &Pose2D, reference: &[Vec2]) -> Option<f64> {
    let p = pose.position();
    let (a, b) = reference
        .windows(2)
        .filter(|w| (w[1] - w[0]).norm() > 1e-9)
        .map(|w| (w[0], w[1]))
        .min_by(|x, y| segment_distance(p, x.0, x.1).total_cmp(&segment_distance(p, y.0, y.1)))?;
    let d = b - a;
    Some(normalize_angle(pose.theta - d.y.atan2(d.x)).abs())
}

/// Finite-difference quality measures; curvature skips near-stationary samples.
pub fn path_quality(poses: &[Pose2D], reference: &[Vec2], dt: f64) -> Result<PathQuality, MetricsError> {
    let n = poses.len();
    if n < 4 {
        return Err(MetricsError::TooShort(n));
    }
    let p: Vec<Vec2> = poses.iter().map(|x| x.position()).collect();
    let vel: Vec<Vec2> = (1..n - 1).map(|k| (p[k + 1] - p[k - 1]) / (2.0 * dt)).collect();
    let second: Vec<Vec2> = (1..n - 1).map(|k| p[k + 1] - p[k] * 2.0 + p[k - 1]).collect();
    let acc: Vec<Vec2> = second.iter().map(|s| s / (dt * dt)).collect();
    let curvature = mean(vel.iter().zip(&acc).filter(|(v, _)| v.norm() > 1e-3).map(|(v, a)| {
        (v.x * a.y - v.y * a.x).abs() / v.norm().powi(3)
    }));
    Ok(PathQuality {
        roughness: mean(second.iter().map(|s| s.norm_squared())),
        curvature,
        jerk: mean(acc.windows(2).map(|w| (w[1] - w[0]).norm() / dt)),
        angular_deviation: mean(poses.iter().filter_map(|x| angular_deviation(x, reference))),
        velocity: mean(p.windows(2).map(|w| (w[1] - w[0]).norm() / dt)),
    })
}

pub fn path_length(poses: &[Pose2D]) -> f64 {
    poses.windows(2).map(|w| (w[1].position() - w[0].position()).norm()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub time_disturbing_individual: f64,
    pub time_disturbing_group: f64,
    pub comfort_distance: Option<f64>,
    pub success: bool,
    pub time_to_goal: Option<f64>,
    pub path_length: f64,
    pub quality: Option<PathQuality>,
}

impl MetricReport {
    pub fn compute(record: &EpisodeRecord, opts: &MetricOptions) -> Result<Self, MetricsError> {
        record.check()?;
        let success = record
            .robot
            .last()
            .is_some_and(|x| (x.position() - record.goal).norm() <= record.goal_tolerance);
        Ok(MetricReport {
            time_disturbing_individual: time_disturbing_individual(record, opts),
            time_disturbing_group: time_disturbing_group(record),
            comfort_distance: comfort_distance(record),
            success,
            time_to_goal: success.then(|| record.duration()),
            path_length: path_length(&record.robot),
            quality: path_quality(&record.robot, &record.reference, record.dt).ok(),
        })
    }

    pub const COLUMNS: [&'static str; 12] = [
        "time_disturbing_individual",
        "time_disturbing_group",
        "comfort_distance",
        "success",
        "time_to_goal",
        "path_length",
        "roughness",
        "curvature",
        "jerk",
        "angular_deviation",
        "velocity",
        "episode_ok",
    ];

    /// Numeric values in `COLUMNS` order; missing values are NaN.
    pub fn values(&self) -> [f64; 12] {
        let q = self.quality;
        let qf = |f: fn(&PathQuality) -> f64| q.as_ref().map_or(f64::NAN, f);
        [
            self.time_disturbing_individual,
            self.time_disturbing_group,
            self.comfort_distance.unwrap_or(f64::NAN),
            if self.success { 1.0 } else { 0.0 },
            self.time_to_goal.unwrap_or(f64::NAN),
            self.path_length,
            qf(|q| q.roughness),
            qf(|q| q.curvature),
            qf(|q| q.jerk),
            qf(|q| q.angular_deviation),
            qf(|q| q.velocity),
            1.0,
        ]
    }
}

/// One batch row: identity columns plus the report, or the failure message.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub scenario: String,
    pub archetype: String,
    pub stack: String,
    pub estimator: String,
    pub seed: u64,
    pub outcome: Result<MetricReport, String>,
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn write_episode_csv<W: Write>(rows: &[EpisodeRow], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["scenario", "archetype", "stack", "estimator", "seed"];
    header.extend(MetricReport::COLUMNS);
    header.push("error");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.scenario.clone(), r.archetype.clone(), r.stack.clone(), r.estimator.clone(), r.seed.to_string()];
        match &r.outcome {
            Ok(m) => {
                rec.extend(m.values().iter().map(|v| fmt_value(*v)));
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), MetricReport::COLUMNS.len() - 1));
                rec.push("0".into());
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation over finite values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub archetype: String,
    pub stack: String,
    pub episodes: usize,
    pub failures: usize,
    /// (mean, std) per entry of `MetricReport::COLUMNS`.
    pub stats: Vec<(f64, f64)>,
}

/// One row per (archetype, stack), in sorted order.
pub fn aggregate(rows: &[EpisodeRow]) -> Vec<AggregateRow> {
    let mut buckets: BTreeMap<(String, String), Vec<&EpisodeRow>> = BTreeMap::new();
    for r in rows {
        buckets.entry((r.archetype.clone(), r.stack.clone())).or_default().push(r);
    }
    buckets
        .into_iter()
        .map(|((archetype, stack), rs)| {
            let ok: Vec<[f64; 12]> = rs.iter().filter_map(|r| r.outcome.as_ref().ok()).map(|m| m.values()).collect();
            let stats = (0..MetricReport::COLUMNS.len())
                .map(|c| mean_std(&ok.iter().map(|v| v[c]).collect::<Vec<_>>()))
                .collect();
            AggregateRow {
                archetype,
                stack,
                episodes: rs.len(),
                failures: rs.len() - ok.len(),
                stats,
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["archetype".to_string(), "stack".into(), "episodes".into(), "failures".into()];
    for c in MetricReport::COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.archetype.clone(), r.stack.clone(), r.episodes.to_string(), r.failures.to_string()];
        for (m, s) in &r.stats {
            rec.push(fmt_value(*m));
            rec.push(fmt_value(*s));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
