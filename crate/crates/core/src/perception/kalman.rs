//! Constant-velocity Kalman filter over `[x, y, vx, vy]`.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use super::{Detection, PerceptionError};
use crate::world::Vec2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u32,
    pub state: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub last_update: f64,
    pub misses: u32,
    pub hits: u32,
    pub confirmed: bool,
    /// Simulator label of the pedestrian last associated with this track.
    /// Used only for ground-truth bookkeeping, never for association.
    pub source: Option<u32>,
}

impl Track {
    pub fn new(track_id: u32, det: &Detection, meas_var: f64, vel_var: f64) -> Self {
        Track {
            track_id,
            state: Vector4::new(det.position.x, det.position.y, 0.0, 0.0),
            covariance: Matrix4::from_diagonal(&Vector4::new(meas_var, meas_var, vel_var, vel_var)),
            last_update: det.timestamp,
            misses: 0,
            hits: 1,
            confirmed: false,
            source: det.source,
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.state[0], self.state[1])
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::new(self.state[2], self.state[3])
    }
}

pub fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

/// White-acceleration process noise for one step of length `dt`.
pub fn process_noise(dt: f64, accel_sigma: f64) -> Matrix4<f64> {
    let q = accel_sigma * accel_sigma;
    let (d2, d3, d4) = (dt * dt, dt * dt * dt, dt * dt * dt * dt);
    let mut m = Matrix4::zeros();
    for (p, v) in [(0, 2), (1, 3)] {
        m[(p, p)] = d4 / 4.0 * q;
        m[(p, v)] = d3 / 2.0 * q;
        m[(v, p)] = d3 / 2.0 * q;
        m[(v, v)] = d2 * q;
    }
    m
}

pub fn kalman_predict(track: &Track, dt: f64, accel_sigma: f64) -> Track {
    assert!(dt >= 0.0, "dt must be non-negative");
    let f = transition(dt);
    let mut out = track.clone();
    out.state = f * track.state;
    let p = f * track.covariance * f.transpose() + process_noise(dt, accel_sigma);
    out.covariance = (p + p.transpose()) * 0.5;
    out
}

/// Position-only measurement update (Joseph form).
pub fn kalman_update(track: &Track, det: &Detection, meas_var: f64) -> Result<Track, PerceptionError> {
    if !(det.position.x.is_finite() && det.position.y.is_finite() && det.timestamp.is_finite()) {
        return Err(PerceptionError::NonFinite);
    }
    if det.timestamp < track.last_update {
        return Err(PerceptionError::OutOfOrder {
            detection: det.timestamp,
            track: track.last_update,
        });
    }
    let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let r = Matrix2::identity() * meas_var;
    let p = &track.covariance;
    let s = h * p * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(PerceptionError::Singular)?;
    let k = p * h.transpose() * s_inv;
    let innovation = Vector2::new(det.position.x, det.position.y) - h * track.state;
    let mut out = track.clone();
    out.state = track.state + k * innovation;
    let i_kh = Matrix4::identity() - k * h;
    let post = i_kh * p * i_kh.transpose() + k * r * k.transpose();
    out.covariance = (post + post.transpose()) * 0.5;
    out.last_update = det.timestamp;
    if det.source.is_some() {
        out.source = det.source;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, y: f64, t: f64) -> Detection {
        Detection {
            position: Vec2::new(x, y),
            timestamp: t,
            source: None,
        }
    }

    fn track(state: [f64; 4], p: [f64; 4]) -> Track {
        Track {
            track_id: 0,
            state: Vector4::from(state),
            covariance: Matrix4::from_diagonal(&Vector4::from(p)),
            last_update: 0.0,
            misses: 0,
            hits: 1,
            confirmed: true,
            source: None,
        }
    }

    #[test]
    fn constant_velocity_prediction() {
        let t = track([0.0, 0.0, 1.0, 0.0], [0.1; 4]);
        let p = kalman_predict(&t, 1.0, 0.5);
        assert_eq!(p.position(), Vec2::new(1.0, 0.0));
        assert_eq!(p.velocity(), Vec2::new(1.0, 0.0));
    }

    #[test]
    fn zero_dt_is_identity() {
        let t = track([1.0, 2.0, 0.3, -0.4], [0.2, 0.3, 0.4, 0.5]);
        let p = kalman_predict(&t, 0.0, 0.5);
        assert_eq!(p.state, t.state);
        assert_eq!(p.covariance, t.covariance);
    }

    #[test]
    fn sequential_predictions_compose_in_mean() {
        // F(0.1)^10 = F(1.0): compare the composed transition matrices directly
        let composed = (0..10).fold(Matrix4::identity(), |acc, _| transition(0.1) * acc);
        assert!((composed - transition(1.0)).abs().max() < 1e-12);
        let t = track([0.5, -1.0, 0.7, 0.2], [0.1; 4]);
        let mut stepped = t.clone();
        for _ in 0..10 {
            stepped = kalman_predict(&stepped, 0.1, 0.5);
        }
        let once = kalman_predict(&t, 1.0, 0.5);
        assert!((stepped.state - once.state).abs().max() < 1e-12);
        // covariances differ: noise accumulates per step
        assert!((stepped.covariance - once.covariance).abs().max() > 1e-6);
    }

    #[test]
    fn measurement_at_mean_keeps_mean() {
        let t = track([2.0, 3.0, 0.1, 0.1], [0.5; 4]);
        let u = kalman_update(&t, &det(2.0, 3.0, 0.0), 0.01).unwrap();
        assert!((u.state - t.state).abs().max() < 1e-15);
    }

    #[test]
    fn tiny_measurement_noise_snaps_to_measurement() {
        let t = track([0.0, 0.0, 0.0, 0.0], [1.0; 4]);
        let u = kalman_update(&t, &det(1.0, -2.0, 0.0), 1e-12).unwrap();
        assert!((u.position() - Vec2::new(1.0, -2.0)).norm() < 1e-9);
    }

    #[test]
    fn scalar_posterior_variance_closed_form() {
        for (p, r) in [(1.0, 1.0), (0.3, 0.0025), (4.0, 0.7), (1e-3, 2.0)] {
            let t = track([0.0, 0.0, 0.0, 0.0], [p, p, 1.0, 1.0]);
            let u = kalman_update(&t, &det(0.2, 0.1, 0.0), r).unwrap();
            let expected = p * r / (p + r);
            assert!((u.covariance[(0, 0)] - expected).abs() < 1e-12);
            assert!((u.covariance[(1, 1)] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_not_larger_on_measured_block() {
        let t = track([0.0, 0.0, 1.0, 1.0], [0.4, 0.2, 1.0, 1.0]);
        let t = kalman_predict(&t, 0.3, 0.5);
        let u = kalman_update(&t, &det(0.5, 0.1, 0.3), 0.0025).unwrap();
        let prior = t.covariance.fixed_view::<2, 2>(0, 0).into_owned();
        let post = u.covariance.fixed_view::<2, 2>(0, 0).into_owned();
        let diff = prior - post;
        let eig = diff.symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|e| *e >= -1e-12));
    }

    #[test]
    fn rejects_bad_detections() {
        let t = track([0.0; 4], [1.0; 4]);
        assert!(matches!(
            kalman_update(&t, &det(f64::NAN, 0.0, 0.0), 0.01),
            Err(PerceptionError::NonFinite)
        ));
        let mut later = t.clone();
        later.last_update = 5.0;
        assert!(matches!(
            kalman_update(&later, &det(0.0, 0.0, 1.0), 0.01),
            Err(PerceptionError::OutOfOrder { .. })
        ));
    }
}
