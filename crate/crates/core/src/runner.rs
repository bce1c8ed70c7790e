//! Episode orchestration in simulated lockstep time: crowd, perception,
//! group estimation, mid-level and local planning, metrics. Episodes are
//! logged as JSON lines and can be replayed for a bitwise comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crowd::CrowdSim;
use crate::estimation::{
    truth_in_track_ids, AnnotationPayload, EstimationError, GroupEstimate, GroupEstimator, MockEstimator,
    OracleEstimator, PendingEstimate, RemoteConfig, RemoteEstimator, PROMPT_V1,
};
use crate::global::{plan_global, Path, PlanError};
use crate::local::{decay_margin, dynamics, NmpcError, NmpcSolver, ObstacleSet, SolveStatus, SLACK_TOLERANCE};
use crate::metrics::{
    aggregate, write_aggregate_csv, write_episode_csv, AggregateRow, EpisodeRecord, EpisodeRow, MetricOptions,
    MetricReport, MetricsError,
};
use crate::midlevel::{group_positions, MidLevelFlag, MidLevelPlanner};
use crate::perception::{simulate_detections, KeyframeBuffer, TrackSnapshot, Tracker};
use crate::world::{
    ControlInput, CostMap, MapSource, PedestrianState, Pose2D, RobotState, ScenarioConfig, ScenarioError, SocialGroup,
    Vec2, BLOCKED_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("global planning failed: {0}")]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Nmpc(#[from] NmpcError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("log format: {0}")]
    Log(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("episode panicked: {0}")]
    Panic(String),
}

fn io_err(path: &FsPath) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Oracle,
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    /// Full stack with group-aware mid-level replanning.
    #[default]
    Gson,
    /// Same stack with the mid-level always keeping the reference path.
    Baseline,
}

macro_rules! text_enum {
    ($t:ty, $($v:ident => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$v),)+
                    other => Err(format!("unknown value {other:?}")),
                }
            }
        }
    };
}

text_enum!(EstimatorKind, Oracle => "oracle", Mock => "mock", Remote => "remote");
text_enum!(Stack, Gson => "gson", Baseline => "baseline");

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunOptions {
    pub estimator: EstimatorKind,
    pub stack: Stack,
    /// Overrides the scenario's seed.
    pub seed: Option<u64>,
    pub metrics: MetricOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    /// Instantiated scenario; map file paths are already resolved.
    pub scenario: ScenarioConfig,
    pub archetype: String,
    pub stack: Stack,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub metrics: MetricOptions,
    pub reference: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidLevelTick {
    pub flag: MidLevelFlag,
    pub goal: Option<Pose2D>,
    pub conflict_samples: usize,
    pub planned: bool,
    /// Active path, logged only when a new one was planned.
    pub path: Option<Vec<Vec2>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTick {
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    /// Smallest barrier value over the horizon; `None` without obstacles.
    pub min_barrier: Option<f64>,
    pub max_slack: f64,
    pub obstacles: usize,
    /// Minimum of `h_i(x_k) - (1 - lambda)^k h_i(x_0)` over the returned horizon.
    pub decay_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickLog {
    pub tick: u64,
    pub t: f64,
    pub robot: RobotState,
    pub pedestrians: Vec<PedestrianState>,
    /// Ground-truth groups over pedestrian ids.
    pub groups: Vec<SocialGroup>,
    pub tracks: Vec<TrackSnapshot>,
    pub keyframe_changed: bool,
    /// Estimate applied at this tick boundary.
    pub estimate: Option<GroupEstimate>,
    pub estimator_error: Option<String>,
    pub midlevel: Option<MidLevelTick>,
    pub midlevel_error: Option<String>,
    pub solver: Option<SolverTick>,
    pub control: ControlInput,
    pub braking: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub outcome: Outcome,
    pub ticks: u64,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Header(LogHeader),
    Tick(TickLog),
    Summary(Summary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub ticks: Vec<TickLog>,
    pub summary: Summary,
}

impl EpisodeLog {
    pub fn to_lines(&self) -> Vec<String> {
        let mut out = vec![serde_json::to_string(&LogLine::Header(self.header.clone())).expect("serializable")];
        out.extend(
            self.ticks
                .iter()
                .map(|t| serde_json::to_string(&LogLine::Tick(t.clone())).expect("serializable")),
        );
        out.push(serde_json::to_string(&LogLine::Summary(self.summary.clone())).expect("serializable"));
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = self.to_lines().join("\n");
        s.push('\n');
        s
    }

    /// Header first, summary last, ticks in between.
    pub fn from_jsonl(text: &str) -> Result<Self, RunError> {
        let mut header = None;
        let mut ticks = Vec::new();
        let mut summary = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            if summary.is_some() {
                return Err(RunError::Log(format!("line {}: content after summary", n + 1)));
            }
            let parsed: LogLine =
                serde_json::from_str(line).map_err(|e| RunError::Log(format!("line {}: {e}", n + 1)))?;
            match (parsed, header.is_some()) {
                (LogLine::Header(h), false) => header = Some(h),
                (LogLine::Header(_), true) => return Err(RunError::Log(format!("line {}: second header", n + 1))),
                (_, false) => return Err(RunError::Log("first line must be the header".into())),
                (LogLine::Tick(t), true) => ticks.push(t),
                (LogLine::Summary(s), true) => summary = Some(s),
            }
        }
        let header = header.ok_or_else(|| RunError::Log("empty log".into()))?;
        let summary = summary.ok_or_else(|| RunError::Log("missing summary".into()))?;
        Ok(EpisodeLog { header, ticks, summary })
    }

    /// Ground-truth record for metrics.
    pub fn record(&self) -> EpisodeRecord {
        build_record(&self.header, &self.ticks)
    }

    /// Smallest true robot-pedestrian distance over the episode.
    pub fn min_pedestrian_distance(&self) -> f64 {
        self.ticks
            .iter()
            .flat_map(|t| t.pedestrians.iter().map(move |p| (p.position - t.robot.pose.position()).norm()))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn replanned(&self) -> bool {
        self.ticks
            .iter()
            .any(|t| t.midlevel.as_ref().is_some_and(|m| m.flag == MidLevelFlag::Replanned))
    }
}

fn build_record(header: &LogHeader, ticks: &[TickLog]) -> EpisodeRecord {
    let sc = &header.scenario;
    EpisodeRecord {
        dt: sc.dt,
        robot: ticks.iter().map(|t| t.robot.pose).collect(),
        pedestrians: ticks.iter().map(|t| t.pedestrians.clone()).collect(),
        groups: ticks.iter().map(|t| t.groups.clone()).collect(),
        reference: header.reference.clone(),
        goal: sc.robot_goal.position(),
        goal_tolerance: sc.robot.goal_tolerance,
        robot_radius: sc.robot.radius,
    }
}

enum Estimator {
    Sync(Box<dyn GroupEstimator>),
    Remote {
        client: RemoteEstimator,
        pending: Option<PendingEstimate>,
    },
}

/// Independent random streams derived from the episode seed.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Lookahead point on `path`, oriented along it.
pub fn carrot(path: &Path, p: Vec2, lookahead: f64) -> Option<Pose2D> {
    let proj = path.project(p)?;
    let s = (proj.arc + lookahead).min(path.length());
    let q = path.point_at(s)?;
    Some(Pose2D::new(q.x, q.y, path.heading_at(s)))
}

/// Speed bound slowing the robot inside the inflation band of static obstacles.
pub fn governed_speed(map: &CostMap, p: Vec2, v_max: f64, crawl: f64) -> f64 {
    let c = map.cost_at(p);
    if c >= BLOCKED_THRESHOLD {
        crawl.min(v_max)
    } else {
        v_max * (1.0 - 0.5 * f64::from(c) / 252.0)
    }
}

/// Braking input: linear speed toward zero at `max_decel`, no turning.
pub fn brake(robot: &RobotState, max_decel: f64, dt: f64) -> ControlInput {
    let dv = (max_decel * dt).min(robot.v.abs());
    ControlInput::new(robot.v - robot.v.signum() * dv, 0.0)
}

/// Runs one episode. Load and planning failures are reported before the loop starts.
pub fn run_episode(scenario: &ScenarioConfig, base_dir: Option<&FsPath>, opts: &RunOptions) -> Result<EpisodeLog, RunError> {
    let seed = opts.seed.unwrap_or(scenario.seed);
    let mut cfg = scenario.instantiate(seed);
    cfg.validate()?;
    let map = cfg.load_map(base_dir)?;
    if let MapSource::File(rel) = &cfg.map {
        let full = base_dir.map(|b| b.join(rel)).unwrap_or_else(|| PathBuf::from(rel));
        cfg.map = MapSource::File(full.to_string_lossy().into_owned());
    }
    let base = map.inflate(cfg.robot.radius, cfg.robot.inflation_band);
    let reference = plan_global(cfg.robot_start, cfg.robot_goal, &base)?;
    let dt = cfg.dt;

    let mut estimator = match opts.estimator {
        EstimatorKind::Oracle => Estimator::Sync(Box::new(OracleEstimator)),
        EstimatorKind::Mock => Estimator::Sync(Box::new(MockEstimator::new(cfg.mock_model, stream_seed(seed, 3))?)),
        EstimatorKind::Remote => Estimator::Remote {
            client: RemoteEstimator::new(RemoteConfig::from_env()?),
            pending: None,
        },
    };
    let scripts: Vec<_> = cfg.groups.iter().map(|g| (g.group_id, g.members.clone(), g.script.clone())).collect();
    let mut crowd = CrowdSim::new(cfg.pedestrians.clone(), &scripts, cfg.crowd.clone());
    let mut sensor_rng = stream_rng(seed, 1);
    let mut tracker = Tracker::new(cfg.perception.clone());
    let mut keyframes = KeyframeBuffer::new(cfg.perception.keyframe_window);
    let mut midlevel = MidLevelPlanner::new(reference.clone(), cfg.social.clone(), cfg.bitstar.clone(), stream_seed(seed, 2));
    let mut solver = NmpcSolver::new(cfg.nmpc.clone())?;
    let nmpc = cfg.nmpc.clone();
    let goal = cfg.robot_goal.position();

    let mut robot = RobotState::at_rest(cfg.robot_start);
    let mut latest: Option<GroupEstimate> = None;
    let mut last_path: Option<Vec<Vec2>> = None;
    let mut ticks = Vec::new();
    let max_ticks = (cfg.time_limit / dt).ceil() as u64;
    let mut outcome = Outcome::Timeout;
    for k in 0..=max_ticks {
        let t = k as f64 * dt;
        let mut tick = TickLog {
            tick: k,
            t,
            robot,
            pedestrians: crowd.pedestrians().to_vec(),
            groups: crowd.ground_truth_groups(),
            tracks: Vec::new(),
            keyframe_changed: false,
            estimate: None,
            estimator_error: None,
            midlevel: None,
            midlevel_error: None,
            solver: None,
            control: ControlInput::new(0.0, 0.0),
            braking: false,
        };
        if (robot.pose.position() - goal).norm() <= cfg.robot.goal_tolerance {
            outcome = Outcome::Success;
            ticks.push(tick);
            break;
        }
        if k == max_ticks {
            ticks.push(tick);
            break;
        }

        // estimates finished since the last tick land at this boundary
        if let Estimator::Remote { pending, .. } = &mut estimator {
            if let Some(res) = pending.as_ref().and_then(|p| p.try_take()) {
                *pending = None;
                match res {
                    Ok(e) => {
                        latest = Some(e.clone());
                        tick.estimate = Some(e);
                    }
                    Err(e) => tick.estimator_error = Some(e.to_string()),
                }
            }
        }

        let detections = simulate_detections(crowd.pedestrians(), &robot.pose, &cfg.perception, t, &mut sensor_rng);
        tracker.step(&detections, t);
        let confirmed = tracker.confirmed();
        tick.tracks = confirmed
            .iter()
            .map(|tr| TrackSnapshot {
                track_id: tr.track_id,
                position: Vec2::new(tr.state[0], tr.state[1]),
                velocity: Vec2::new(tr.state[2], tr.state[3]),
            })
            .collect();

        if let Some(frame) = keyframes.push(tracker.snapshot(t)) {
            tick.keyframe_changed = true;
            let payload = AnnotationPayload::from_keyframe(&frame, PROMPT_V1);
            let ids: Vec<(u32, Option<u32>)> = tracker.all_tracks().iter().map(|tr| (tr.track_id, tr.source)).collect();
            let truth = truth_in_track_ids(&crowd.ground_truth_groups(), &ids);
            match &mut estimator {
                Estimator::Sync(est) => match est.estimate(&payload, &truth) {
                    Ok(e) => {
                        latest = Some(e.clone());
                        tick.estimate = Some(e);
                    }
                    Err(e) => tick.estimator_error = Some(e.to_string()),
                },
                // a newer keyframe supersedes an unfinished query
                Estimator::Remote { client, pending } => *pending = Some(client.spawn(payload)),
            }
        }

        let active = match opts.stack {
            Stack::Baseline => {
                tick.midlevel = Some(MidLevelTick {
                    flag: MidLevelFlag::KeptReference,
                    goal: None,
                    conflict_samples: 0,
                    planned: false,
                    path: None,
                });
                Some(reference.clone())
            }
            Stack::Gson => {
                let positions: BTreeMap<u32, Vec2> = tick.tracks.iter().map(|s| (s.track_id, s.position)).collect();
                let groups = latest.as_ref().map(|e| group_positions(e, &positions)).unwrap_or_default();
                match midlevel.cycle(&base, &groups, &robot.pose) {
                    Ok(out) => {
                        let changed = last_path.as_ref() != Some(&out.active.waypoints);
                        if changed {
                            last_path = Some(out.active.waypoints.clone());
                        }
                        tick.midlevel = Some(MidLevelTick {
                            flag: out.flag,
                            goal: out.goal,
                            conflict_samples: out.conflict_samples,
                            planned: out.planned,
                            path: changed.then(|| out.active.waypoints.clone()),
                        });
                        Some(out.active)
                    }
                    Err(e) => {
                        tick.midlevel_error = Some(e.to_string());
                        None
                    }
                }
            }
        };

        let mut control = None;
        if let Some(target) = active.as_ref().and_then(|p| carrot(p, robot.pose.position(), nmpc.lookahead)) {
            let obs_in: Vec<(Vec2, Vec2)> = tick.tracks.iter().map(|s| (s.position, s.velocity)).collect();
            let obstacles = ObstacleSet::from_tracks(&obs_in, robot.pose.position(), &nmpc);
            let v_lim = governed_speed(&base, robot.pose.position(), nmpc.v_max, nmpc.relaxed_speed);
            let sol = solver.solve_limited(&robot, &target, &obstacles, v_lim)?;
            tick.solver = Some(SolverTick {
                status: sol.status,
                iterations: sol.iterations,
                objective: sol.objective,
                min_barrier: sol.min_barrier.is_finite().then_some(sol.min_barrier),
                max_slack: sol.max_slack,
                obstacles: obstacles.len(),
                decay_margin: decay_margin(&sol.trajectory, &obstacles, &nmpc),
            });
            control = match sol.status {
                SolveStatus::Optimal => Some(sol.control),
                SolveStatus::Relaxed => Some(ControlInput::new(
                    sol.control.v.clamp(-nmpc.relaxed_speed, nmpc.relaxed_speed),
                    sol.control.omega,
                )),
                SolveStatus::MaxIterations if sol.max_slack <= SLACK_TOLERANCE => Some(sol.control),
                SolveStatus::MaxIterations | SolveStatus::Infeasible => None,
            };
        }
        let u = control.unwrap_or_else(|| {
            tick.braking = true;
            solver.reset();
            brake(&robot, cfg.robot.max_decel, dt)
        });
        tick.control = u;
        ticks.push(tick);

        robot = RobotState {
            pose: dynamics(&robot.pose, &u, dt),
            v: u.v,
            omega: u.omega,
        };
        crowd.step(Some(robot.pose.position()), dt);
    }

    let header = LogHeader {
        archetype: cfg.archetype().map_or("none", |a| a.as_str()).to_string(),
        scenario: cfg,
        stack: opts.stack,
        estimator: opts.estimator,
        seed,
        metrics: opts.metrics,
        reference: reference.waypoints.clone(),
    };
    let metrics = MetricReport::compute(&build_record(&header, &ticks), &opts.metrics)?;
    let summary = Summary {
        outcome,
        ticks: ticks.len() as u64,
        metrics,
    };
    Ok(EpisodeLog { header, ticks, summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub lines: usize,
    /// 1-based line number of the first mismatch.
    pub first_difference: Option<usize>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.first_difference.is_none()
    }
}

/// Re-runs the episode described by a log and compares the output line by line.
pub fn replay(log_text: &str) -> Result<(EpisodeLog, ReplayReport), RunError> {
    let log = EpisodeLog::from_jsonl(log_text)?;
    let opts = RunOptions {
        estimator: log.header.estimator,
        stack: log.header.stack,
        seed: Some(log.header.seed),
        metrics: log.header.metrics,
    };
    let fresh = run_episode(&log.header.scenario, None, &opts)?;
    let old: Vec<&str> = log_text.lines().filter(|l| !l.trim().is_empty()).collect();
    let new = fresh.to_lines();
    let first_difference = (0..old.len().max(new.len()))
        .find(|&i| old.get(i).copied() != new.get(i).map(String::as_str))
        .map(|i| i + 1);
    Ok((
        fresh,
        ReplayReport {
            lines: new.len(),
            first_difference,
        },
    ))
}

fn default_stacks() -> Vec<Stack> {
    vec![Stack::Gson, Stack::Baseline]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchEntry {
    /// Scenario file, relative to the manifest.
    pub scenario: String,
    /// Explicit seeds; otherwise `seed_count` seeds starting at the scenario seed.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub seed_count: Option<u64>,
    #[serde(default = "default_stacks")]
    pub stacks: Vec<Stack>,
    #[serde(default)]
    pub estimator: EstimatorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchManifest {
    pub entries: Vec<BatchEntry>,
    /// Output directory, relative to the manifest.
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub write_logs: bool,
    #[serde(default)]
    pub metrics: MetricOptions,
}

#[derive(Debug, Clone)]
pub struct BatchJob {
    pub label: String,
    pub scenario: ScenarioConfig,
    pub base_dir: Option<PathBuf>,
    pub opts: RunOptions,
}

impl BatchManifest {
    pub fn from_json_str(text: &str) -> Result<Self, RunError> {
        let m: BatchManifest = serde_json::from_str(text).map_err(|e| RunError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &FsPath) -> Result<Self, RunError> {
        Self::from_json_str(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Manifest(m));
        if self.entries.is_empty() {
            return bad("no entries".into());
        }
        for (i, e) in self.entries.iter().enumerate() {
            match (&e.seeds, e.seed_count) {
                (Some(s), None) if !s.is_empty() => {}
                (None, Some(n)) if (1..=100_000).contains(&n) => {}
                _ => return bad(format!("entry {i}: give exactly one of a non-empty `seeds` or `seed_count` in 1..=100000")),
            }
            if e.stacks.is_empty() {
                return bad(format!("entry {i}: no stacks"));
            }
        }
        Ok(())
    }

    /// Expands entries into episodes in manifest order.
    pub fn jobs(&self, manifest_dir: &FsPath) -> Result<Vec<BatchJob>, RunError> {
        let mut jobs = Vec::new();
        for e in &self.entries {
            let path = manifest_dir.join(&e.scenario);
            let scenario = ScenarioConfig::load(&path)?;
            let seeds: Vec<u64> = match (&e.seeds, e.seed_count) {
                (Some(s), _) => s.clone(),
                (None, Some(n)) => (0..n).map(|k| scenario.seed.wrapping_add(k)).collect(),
                (None, None) => unreachable!("validated"),
            };
            for &stack in &e.stacks {
                for &seed in &seeds {
                    jobs.push(BatchJob {
                        label: e.scenario.clone(),
                        scenario: scenario.clone(),
                        base_dir: path.parent().map(FsPath::to_path_buf),
                        opts: RunOptions {
                            estimator: e.estimator,
                            stack,
                            seed: Some(seed),
                            metrics: self.metrics,
                        },
                    });
                }
            }
        }
        Ok(jobs)
    }
}

#[derive(Debug, Clone)]
pub struct BatchReport {
    pub rows: Vec<EpisodeRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl BatchReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Runs every job; a failing episode becomes an error row and the batch
/// continues. With `out_dir`, writes `episodes.csv`, `aggregate.csv` and
/// optionally one log per episode under `logs/`.
pub fn run_batch(jobs: &[BatchJob], out_dir: Option<&FsPath>, write_logs: bool) -> Result<BatchReport, RunError> {
    if jobs.is_empty() {
        return Err(RunError::Manifest("empty batch".into()));
    }
    if let Some(dir) = out_dir {
        let logs = dir.join("logs");
        std::fs::create_dir_all(if write_logs { &logs } else { dir }).map_err(io_err(dir))?;
    }
    let mut rows = Vec::with_capacity(jobs.len());
    for job in jobs {
        let seed = job.opts.seed.unwrap_or(job.scenario.seed);
        let result = catch_unwind(AssertUnwindSafe(|| run_episode(&job.scenario, job.base_dir.as_deref(), &job.opts)))
            .unwrap_or_else(|p| Err(RunError::Panic(panic_message(p))));
        if let (Some(dir), true, Ok(log)) = (out_dir, write_logs, &result) {
            let name = format!("{}_{}_{}_{}.jsonl", log.header.scenario.name, job.opts.stack, job.opts.estimator, seed);
            let path = dir.join("logs").join(name);
            std::fs::write(&path, log.to_jsonl()).map_err(io_err(&path))?;
        }
        rows.push(EpisodeRow {
            scenario: job.label.clone(),
            archetype: job.scenario.archetype().map_or("none", |a| a.as_str()).to_string(),
            stack: job.opts.stack.to_string(),
            estimator: job.opts.estimator.to_string(),
            seed,
            outcome: result.map(|l| l.summary.metrics).map_err(|e| e.to_string()),
        });
    }
    let agg = aggregate(&rows);
    if let Some(dir) = out_dir {
        let p = dir.join("episodes.csv");
        write_episode_csv(&rows, std::fs::File::create(&p).map_err(io_err(&p))?)?;
        let p = dir.join("aggregate.csv");
        write_aggregate_csv(&agg, std::fs::File::create(&p).map_err(io_err(&p))?)?;
    }
    Ok(BatchReport { rows, aggregate: agg })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enums_round_trip_text() {
        for s in ["oracle", "mock", "remote"] {
            assert_eq!(s.parse::<EstimatorKind>().unwrap().to_string(), s);
        }
        for s in ["gson", "baseline"] {
            assert_eq!(s.parse::<Stack>().unwrap().to_string(), s);
        }
        assert!("dwa".parse::<Stack>().is_err());
    }

    #[test]
    fn brake_decelerates_to_zero() {
        let mut r = RobotState::at_rest(Pose2D::new(0.0, 0.0, 0.0));
        r.v = 0.25;
        let u = brake(&r, 1.0, 0.1);
        assert!((u.v - 0.15).abs() < 1e-12 && u.omega == 0.0);
        r.v = 0.05;
        assert_eq!(brake(&r, 1.0, 0.1).v, 0.0);
        r.v = -0.5;
        assert!((brake(&r, 1.0, 0.1).v + 0.4).abs() < 1e-12);
    }

    #[test]
    fn carrot_clamps_to_path_end() {
        let p = Path::new(vec![Vec2::new(0.0, 0.0), Vec2::new(2.0, 0.0)]);
        let c = carrot(&p, Vec2::new(0.2, 0.1), 1.5).unwrap();
        assert!((c.x - 1.7).abs() < 1e-9 && c.y.abs() < 1e-12);
        let c = carrot(&p, Vec2::new(1.9, 0.0), 1.5).unwrap();
        assert!((c.x - 2.0).abs() < 1e-12);
    }

    #[test]
    fn governor_slows_in_inflation() {
        let mut m = CostMap::with_extent(4.0, 4.0, 0.1).unwrap();
        m.fill_rect(Vec2::new(0.0, 0.0), Vec2::new(1.0, 4.0));
        let m = m.inflate(0.3, 0.5);
        assert_eq!(governed_speed(&m, Vec2::new(3.5, 2.0), 0.8, 0.2), 0.8);
        let near = governed_speed(&m, Vec2::new(1.5, 2.0), 0.8, 0.2);
        assert!(near < 0.8 && near >= 0.4);
        assert_eq!(governed_speed(&m, Vec2::new(0.5, 2.0), 0.8, 0.2), 0.2);
    }

    #[test]
    fn manifest_validation() {
        assert!(BatchManifest::from_json_str(r#"{"entries": []}"#).is_err());
        assert!(BatchManifest::from_json_str(r#"{"entries": [{"scenario": "a.json"}]}"#).is_err());
        assert!(BatchManifest::from_json_str(r#"{"entries": [{"scenario": "a.json", "seeds": [1], "seed_count": 2}]}"#).is_err());
        let m = BatchManifest::from_json_str(r#"{"entries": [{"scenario": "a.json", "seed_count": 3}]}"#).unwrap();
        assert_eq!(m.entries[0].stacks, vec![Stack::Gson, Stack::Baseline]);
        assert!(BatchManifest::from_json_str(r#"{"entries": [], "bogus": 1}"#).is_err());
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(run_batch(&[], None, false), Err(RunError::Manifest(_))));
    }

    #[test]
    fn log_parser_rejects_bad_shapes() {
        assert!(EpisodeLog::from_jsonl("").is_err());
        assert!(EpisodeLog::from_jsonl("{\"type\":\"summary\"}").is_err());
        assert!(EpisodeLog::from_jsonl("not json").is_err());
    }
}
