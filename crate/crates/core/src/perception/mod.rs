//! Simulated person detections and the multi-target tracker that turns them
//! into persistent tracks: Kalman filtering plus Hungarian association.

mod hungarian;
mod kalman;
mod keyframe;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{normalize_angle, PedestrianState, Pose2D, Vec2};

pub use hungarian::{associate, solve as solve_assignment, Assignment};
pub use kalman::{kalman_predict, kalman_update, process_noise, transition, Track};
pub use keyframe::{Keyframe, KeyframeBuffer, TrackSnapshot};

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("detection contains non-finite values")]
    NonFinite,
    #[error("detection at t={detection} precedes track update at t={track}")]
    OutOfOrder { detection: f64, track: f64 },
    #[error("innovation covariance is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub position: Vec2,
    pub timestamp: f64,
    /// Which simulated pedestrian produced this detection.
    #[serde(default)]
    pub source: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionParams {
    /// Sensor range (m).
    pub range: f64,
    /// Field of view (degrees, centered on the robot heading).
    pub fov_deg: f64,
    /// Detection position noise (m, 1 sigma).
    pub noise_sigma: f64,
    pub dropout: f64,
    /// Process noise acceleration (m/s^2, 1 sigma).
    pub accel_sigma: f64,
    /// Association gate (m).
    pub gate: f64,
    /// Consecutive associations before a track is reported.
    pub confirm_hits: u32,
    pub max_misses: u32,
    /// Initial velocity variance of a new track ((m/s)^2).
    pub init_velocity_var: f64,
    /// Keyframe window (s).
    pub keyframe_window: f64,
}

impl Default for PerceptionParams {
    fn default() -> Self {
        PerceptionParams {
            range: 10.0,
            fov_deg: 360.0,
            noise_sigma: 0.05,
            dropout: 0.05,
            accel_sigma: 0.5,
            gate: 1.0,
            confirm_hits: 2,
            max_misses: 10,
            init_velocity_var: 1.0,
            keyframe_window: 3.0,
        }
    }
}

/// Range/FOV-limited, noisy, lossy detections of the true pedestrians.
pub fn simulate_detections<R: Rng>(
    peds: &[PedestrianState],
    robot: &Pose2D,
    params: &PerceptionParams,
    t: f64,
    rng: &mut R,
) -> Vec<Detection> {
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("finite sigma");
    let half_fov = params.fov_deg.to_radians() / 2.0;
    let mut out = Vec::new();
    for p in peds {
        let rel = p.position - robot.position();
        if rel.norm() > params.range {
            continue;
        }
        if half_fov < std::f64::consts::PI {
            let bearing = normalize_angle(rel.y.atan2(rel.x) - robot.theta);
            if bearing.abs() > half_fov {
                continue;
            }
        }
        // draw both numbers regardless so the stream does not depend on outcomes
        let drop = rng.random::<f64>() < params.dropout;
        let n = Vec2::new(noise.sample(rng), noise.sample(rng));
        if drop {
            continue;
        }
        out.push(Detection {
            position: p.position + n,
            timestamp: t,
            source: Some(p.id),
        });
    }
    out
}

/// Single-owner tracker, stepped in timestamp order.
#[derive(Debug, Clone)]
pub struct Tracker {
    params: PerceptionParams,
    tracks: Vec<Track>,
    next_id: u32,
    time: Option<f64>,
}

impl Tracker {
    pub fn new(params: PerceptionParams) -> Self {
        Tracker {
            params,
            tracks: Vec::new(),
            next_id: 1,
            time: None,
        }
    }

    pub fn all_tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn confirmed(&self) -> Vec<Track> {
        self.tracks.iter().filter(|t| t.confirmed).cloned().collect()
    }

    /// Predict to `t`, associate, update, spawn and retire tracks.
    pub fn step(&mut self, detections: &[Detection], t: f64) {
        let dt = self.time.map_or(0.0, |prev| (t - prev).max(0.0));
        self.time = Some(t);
        let (accel, meas_var) = (self.params.accel_sigma, self.params.noise_sigma.powi(2).max(1e-12));
        for tr in &mut self.tracks {
            *tr = kalman_predict(tr, dt, accel);
        }
        let usable: Vec<&Detection> = detections
            .iter()
            .filter(|d| d.position.x.is_finite() && d.position.y.is_finite())
            .collect();
        let track_pos: Vec<Vec2> = self.tracks.iter().map(Track::position).collect();
        let det_pos: Vec<Vec2> = usable.iter().map(|d| d.position).collect();
        let a = associate(&track_pos, &det_pos, self.params.gate);
        for &(ti, di) in &a.pairs {
            let tr = &mut self.tracks[ti];
            let mut det = *usable[di];
            det.timestamp = det.timestamp.max(tr.last_update);
            if let Ok(updated) = kalman_update(tr, &det, meas_var) {
                *tr = updated;
                tr.hits += 1;
                tr.misses = 0;
                if tr.hits >= self.params.confirm_hits {
                    tr.confirmed = true;
                }
            }
        }
        let mut keep = vec![true; self.tracks.len()];
        for &ti in &a.unmatched_tracks {
            let tr = &mut self.tracks[ti];
            tr.misses += 1;
            if !tr.confirmed || tr.misses > self.params.max_misses {
                keep[ti] = false;
            }
        }
        let mut idx = 0;
        self.tracks.retain(|_| {
            idx += 1;
            keep[idx - 1]
        });
        for &di in &a.unmatched_detections {
            let mut tr = Track::new(self.next_id, usable[di], meas_var, self.params.init_velocity_var);
            tr.confirmed = self.params.confirm_hits <= 1;
            self.next_id += 1;
            self.tracks.push(tr);
        }
    }

    pub fn snapshot(&self, t: f64) -> Keyframe {
        Keyframe {
            timestamp: t,
            entries: self
                .tracks
                .iter()
                .filter(|tr| tr.confirmed && tr.misses == 0)
                .map(|tr| TrackSnapshot {
                    track_id: tr.track_id,
                    position: tr.position(),
                    velocity: tr.velocity(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn walker(id: u32, x: f64, y: f64, vx: f64, vy: f64) -> PedestrianState {
        PedestrianState {
            id,
            position: Vec2::new(x, y),
            velocity: Vec2::new(vx, vy),
            heading: vy.atan2(vx),
        }
    }

    #[test]
    fn detections_respect_range_fov_and_dropout() {
        let peds = [walker(1, 5.0, 0.0, 0.0, 0.0), walker(2, 20.0, 0.0, 0.0, 0.0), walker(3, -5.0, 0.0, 0.0, 0.0)];
        let robot = Pose2D::new(0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = PerceptionParams {
            dropout: 0.0,
            ..Default::default()
        };
        let d = simulate_detections(&peds, &robot, &p, 0.0, &mut rng);
        assert_eq!(d.iter().map(|d| d.source.unwrap()).collect::<Vec<_>>(), vec![1, 3]);
        let front = PerceptionParams {
            fov_deg: 180.0,
            dropout: 0.0,
            ..Default::default()
        };
        let d = simulate_detections(&peds, &robot, &front, 0.0, &mut rng);
        assert_eq!(d.len(), 1);
        let all_drop = PerceptionParams {
            dropout: 1.0,
            ..Default::default()
        };
        assert!(simulate_detections(&peds, &robot, &all_drop, 0.0, &mut rng).is_empty());
    }

    #[test]
    fn tracks_need_two_hits_and_expire_after_misses() {
        let mut tr = Tracker::new(PerceptionParams::default());
        let det = |t: f64| Detection {
            position: Vec2::new(1.0, 1.0),
            timestamp: t,
            source: Some(4),
        };
        tr.step(&[det(0.0)], 0.0);
        assert!(tr.confirmed().is_empty());
        tr.step(&[det(0.1)], 0.1);
        assert_eq!(tr.confirmed().len(), 1);
        assert_eq!(tr.confirmed()[0].source, Some(4));
        for k in 0..10 {
            tr.step(&[], 0.2 + 0.1 * k as f64);
        }
        assert_eq!(tr.confirmed().len(), 1, "survives max_misses");
        tr.step(&[], 1.2);
        assert!(tr.confirmed().is_empty());
    }

    #[test]
    fn tentative_track_without_second_hit_is_dropped() {
        let mut tr = Tracker::new(PerceptionParams::default());
        tr.step(
            &[Detection {
                position: Vec2::new(3.0, 0.0),
                timestamp: 0.0,
                source: None,
            }],
            0.0,
        );
        tr.step(&[], 0.1);
        assert!(tr.all_tracks().is_empty());
    }

    #[test]
    fn ids_stable_on_clean_detections() {
        let mut peds = vec![
            walker(1, 0.0, 0.0, 0.5, 0.0),
            walker(2, 0.0, 3.0, 0.4, -0.1),
            walker(3, 6.0, 6.0, -0.5, 0.0),
        ];
        let params = PerceptionParams {
            noise_sigma: 0.0,
            dropout: 0.0,
            range: 100.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tracker = Tracker::new(params.clone());
        let mut owner: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for k in 0..300 {
            let t = k as f64 * 0.1;
            let dets = simulate_detections(&peds, &Pose2D::new(0.0, 0.0, 0.0), &params, t, &mut rng);
            tracker.step(&dets, t);
            for tr in tracker.confirmed() {
                owner.entry(tr.source.unwrap()).or_default().insert(tr.track_id);
            }
            for p in &mut peds {
                p.position += p.velocity * 0.1;
            }
        }
        assert_eq!(owner.len(), 3);
        assert!(owner.values().all(|ids| ids.len() == 1), "{owner:?}");
    }

    #[test]
    fn covariance_stays_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let peds = vec![walker(1, 1.0, 0.0, 0.3, 0.1), walker(2, -2.0, 2.0, 0.0, -0.4)];
        let params = PerceptionParams::default();
        let mut tracker = Tracker::new(params.clone());
        let mut peds = peds;
        for k in 0..200 {
            let t = k as f64 * 0.1;
            let dets = simulate_detections(&peds, &Pose2D::new(0.0, 0.0, 0.0), &params, t, &mut rng);
            tracker.step(&dets, t);
            for tr in tracker.all_tracks() {
                let eig = tr.covariance.symmetric_eigen().eigenvalues;
                assert!(eig.iter().all(|e| *e > 0.0));
                assert!((tr.covariance - tr.covariance.transpose()).abs().max() < 1e-15);
            }
            for p in &mut peds {
                p.position += p.velocity * 0.1;
            }
        }
    }
}
