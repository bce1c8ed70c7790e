//! NMPC local planner with discrete control-barrier-function constraints
//! keeping the robot `d_safe` away from every tracked pedestrian.
//!
//! The program is condensed over the controls (single shooting) and solved
//! by SQP: QP subproblems on the eigenvalue-clamped objective Hessian with
//! Levenberg-Marquardt damping and an L1 merit line search. Each obstacle gets one non-negative slack with a
//! heavy linear penalty so the program stays feasible.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{normalize_angle, ControlInput, Pose2D, RobotState, Vec2};

#[derive(Debug, Error, PartialEq)]
pub enum NmpcError {
    #[error("invalid NMPC parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite initial state")]
    NonFiniteState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmpcParams {
    pub horizon: usize,
    pub dt: f64,
    pub v_max: f64,
    pub omega_max: f64,
    /// Diagonal of the control weight (v, omega).
    pub q_u: [f64; 2],
    /// Diagonal of the terminal weight (x, y, theta).
    pub p_f: [f64; 3],
    /// Per-step barrier decay rate, in (0, 1].
    pub lambda: f64,
    pub d_safe: f64,
    pub slack_weight: f64,
    pub max_iterations: usize,
    /// KKT residual at which the SQP stops (inf-norm).
    pub tolerance: f64,
    /// Pedestrians farther than this are ignored (m).
    pub obstacle_range: f64,
    /// Carrot distance along the active path (m).
    pub lookahead: f64,
    /// Speed cap while a pedestrian is already inside `d_safe` (m/s).
    pub relaxed_speed: f64,
}

impl Default for NmpcParams {
    fn default() -> Self {
        NmpcParams {
            horizon: 20,
            dt: 0.1,
            v_max: 0.8,
            omega_max: 1.0,
            q_u: [0.5, 0.1],
            p_f: [10.0, 10.0, 1.0],
            lambda: 0.2,
            d_safe: 0.6,
            slack_weight: 1e4,
            max_iterations: 50,
            tolerance: 1e-4,
            obstacle_range: 5.0,
            lookahead: 1.5,
            relaxed_speed: 0.2,
        }
    }
}

impl NmpcParams {
    pub fn validate(&self) -> Result<(), NmpcError> {
        let bad = |m: &str| Err(NmpcError::InvalidParams(m.to_string()));
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.horizon == 0 || self.horizon > 200 {
            return bad("horizon must be in 1..=200");
        }
        if !(pos(self.dt) && pos(self.v_max) && pos(self.omega_max) && pos(self.d_safe)) {
            return bad("dt, v_max, omega_max and d_safe must be > 0");
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda must lie in (0, 1]");
        }
        if !self.q_u.iter().all(|w| pos(*w)) {
            return bad("q_u must be positive definite");
        }
        if !self.p_f.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return bad("p_f must be positive semidefinite");
        }
        if !(pos(self.slack_weight) && pos(self.tolerance) && self.max_iterations > 0) {
            return bad("solver settings must be positive");
        }
        if !(pos(self.obstacle_range) && pos(self.lookahead) && pos(self.relaxed_speed)) {
            return bad("range, lookahead and relaxed_speed must be > 0");
        }
        Ok(())
    }
}

/// Unicycle Euler step.
pub fn dynamics(x: &Pose2D, u: &ControlInput, dt: f64) -> Pose2D {
    Pose2D::new(
        x.x + u.v * x.theta.cos() * dt,
        x.y + u.v * x.theta.sin() * dt,
        normalize_angle(x.theta + u.omega * dt),
    )
}

/// Squared clearance minus `d_safe` squared.
pub fn barrier(p: Vec2, ped: Vec2, d_safe: f64) -> f64 {
    (p - ped).norm_squared() - d_safe * d_safe
}

/// Constant-velocity predictions, `horizon + 1` positions per pedestrian.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObstacleSet {
    pub predictions: Vec<Vec<Vec2>>,
}

impl ObstacleSet {
    /// Extrapolates `(position, velocity)` pairs within `range` of `robot`.
    pub fn from_tracks(tracks: &[(Vec2, Vec2)], robot: Vec2, params: &NmpcParams) -> Self {
        ObstacleSet {
            predictions: tracks
                .iter()
                .filter(|(p, _)| (p - robot).norm() <= params.obstacle_range)
                .map(|(p, v)| (0..=params.horizon).map(|k| p + v * (k as f64 * params.dt)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    /// Converged while a pedestrian already stands inside `d_safe`; its
    /// barrier may be relaxed through the slack.
    Relaxed,
    MaxIterations,
    /// Converged only by relaxing a barrier that held at the initial state.
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmpcSolution {
    pub control: ControlInput,
    pub controls: Vec<ControlInput>,
    /// Predicted states x_0 .. x_N.
    pub trajectory: Vec<Pose2D>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub max_slack: f64,
    /// Minimum barrier value over the horizon and obstacles (infinite without obstacles).
    pub min_barrier: f64,
}

/// The condensed program for one solve. Decision vector: `[v_0, w_0, ..., v_{N-1}, w_{N-1}, s_1, ..., s_M]`.
#[derive(Debug, Clone)]
pub struct NmpcProblem {
    pub x0: Pose2D,
    pub goal: Pose2D,
    pub obstacles: ObstacleSet,
    pub params: NmpcParams,
}

/// Slack below this counts as zero (m^2). Summed over a horizon the
/// resulting barrier-decay error stays below `5 * SLACK_TOLERANCE`.
pub const SLACK_TOLERANCE: f64 = 1e-7;

/// The QP asks for this much barrier-decay headroom so linearization error
/// does not leave the nonlinear constraint slightly violated.
const QP_MARGIN: f64 = 1e-6;

/// Relative merit decrease below which the SQP counts as converged.
const MERIT_STALL: f64 = 1e-9;

/// Small quadratic weight on slacks so the QP Hessian stays definite.
const SLACK_QUAD: f64 = 1e-4;

struct Rollout {
    states: Vec<Pose2D>,
    /// d(x_k)/du, 3 x 2N, for k = 0..=N.
    sens: Vec<DMatrix<f64>>,
}

impl NmpcProblem {
    pub fn n_controls(&self) -> usize {
        2 * self.params.horizon
    }

    pub fn n_vars(&self) -> usize {
        self.n_controls() + self.obstacles.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.obstacles.len() * self.params.horizon
    }

    fn controls(&self, z: &[f64]) -> Vec<ControlInput> {
        (0..self.params.horizon).map(|k| ControlInput::new(z[2 * k], z[2 * k + 1])).collect()
    }

    pub fn rollout_states(&self, z: &[f64]) -> Vec<Pose2D> {
        let mut xs = vec![self.x0];
        for u in self.controls(z) {
            xs.push(dynamics(xs.last().expect("non-empty"), &u, self.params.dt));
        }
        xs
    }

    fn rollout(&self, z: &[f64]) -> Rollout {
        let n = self.n_controls();
        let dt = self.params.dt;
        let mut states = vec![self.x0];
        let mut sens = vec![DMatrix::zeros(3, n)];
        for (k, u) in self.controls(z).iter().enumerate() {
            let x = states[k];
            let (s, c) = x.theta.sin_cos();
            let mut a = Matrix3::identity();
            a[(0, 2)] = -u.v * s * dt;
            a[(1, 2)] = u.v * c * dt;
            let prev = &sens[k];
            let mut next = DMatrix::zeros(3, n);
            for col in 0..2 * k {
                for r in 0..3 {
                    next[(r, col)] = (0..3).map(|m| a[(r, m)] * prev[(m, col)]).sum();
                }
            }
            next[(0, 2 * k)] = c * dt;
            next[(1, 2 * k)] = s * dt;
            next[(2, 2 * k + 1)] = dt;
            states.push(dynamics(&x, u, dt));
            sens.push(next);
        }
        Rollout { states, sens }
    }

    fn terminal_error(&self, x: &Pose2D) -> [f64; 3] {
        [x.x - self.goal.x, x.y - self.goal.y, normalize_angle(x.theta - self.goal.theta)]
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let xs = self.rollout_states(z);
        let e = self.terminal_error(xs.last().expect("non-empty"));
        let p = &self.params;
        let mut j: f64 = (0..3).map(|r| p.p_f[r] * e[r] * e[r]).sum();
        for k in 0..p.horizon {
            j += p.q_u[0] * z[2 * k] * z[2 * k] + p.q_u[1] * z[2 * k + 1] * z[2 * k + 1];
        }
        for &s in &z[self.n_controls()..] {
            j += p.slack_weight * s + SLACK_QUAD * s * s;
        }
        j
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let ro = self.rollout(z);
        self.gradient_with(z, &ro)
    }

    fn gradient_with(&self, z: &[f64], ro: &Rollout) -> Vec<f64> {
        let p = &self.params;
        let e = self.terminal_error(ro.states.last().expect("non-empty"));
        let sn = ro.sens.last().expect("non-empty");
        let mut g = vec![0.0; self.n_vars()];
        for col in 0..self.n_controls() {
            g[col] = (0..3).map(|r| 2.0 * p.p_f[r] * e[r] * sn[(r, col)]).sum::<f64>()
                + 2.0 * p.q_u[col % 2] * z[col];
        }
        for (k, &s) in z[self.n_controls()..].iter().enumerate() {
            g[self.n_controls() + k] = p.slack_weight + 2.0 * SLACK_QUAD * s;
        }
        g
    }

    /// `c[i * N + k] = h_i(x_{k+1}) - (1 - lambda) h_i(x_k) + s_i`, feasible when >= 0.
    pub fn constraints(&self, z: &[f64]) -> Vec<f64> {
        let xs = self.rollout_states(z);
        self.constraints_with(z, &xs)
    }

    fn constraints_with(&self, z: &[f64], xs: &[Pose2D]) -> Vec<f64> {
        let p = &self.params;
        let nc = self.n_controls();
        let mut c = Vec::with_capacity(self.n_constraints());
        for (i, pred) in self.obstacles.predictions.iter().enumerate() {
            for k in 0..p.horizon {
                let h1 = barrier(xs[k + 1].position(), pred[k + 1], p.d_safe);
                let h0 = barrier(xs[k].position(), pred[k], p.d_safe);
                c.push(h1 - (1.0 - p.lambda) * h0 + z[nc + i]);
            }
        }
        c
    }

    pub fn constraint_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let ro = self.rollout(z);
        self.jacobian_with(&ro)
    }

    fn jacobian_with(&self, ro: &Rollout) -> DMatrix<f64> {
        let p = &self.params;
        let nc = self.n_controls();
        let mut jac = DMatrix::zeros(self.n_constraints(), self.n_vars());
        for (i, pred) in self.obstacles.predictions.iter().enumerate() {
            for k in 0..p.horizon {
                let row = i * p.horizon + k;
                let d1 = ro.states[k + 1].position() - pred[k + 1];
                let d0 = ro.states[k].position() - pred[k];
                for col in 0..2 * (k + 1) {
                    let g1 = 2.0 * (d1.x * ro.sens[k + 1][(0, col)] + d1.y * ro.sens[k + 1][(1, col)]);
                    let g0 = 2.0 * (d0.x * ro.sens[k][(0, col)] + d0.y * ro.sens[k][(1, col)]);
                    jac[(row, col)] = g1 - (1.0 - p.lambda) * g0;
                }
                jac[(row, nc + i)] = 1.0;
            }
        }
        jac
    }

    /// Exact objective Hessian over the controls. Under Euler unicycle steps
    /// `x_N = x_0 + dt sum v_k cos(theta_k)` with `theta_k` linear in the
    /// earlier omegas, so the terminal-state curvature has a closed form.
    fn exact_control_hessian(&self, z: &[f64], ro: &Rollout) -> DMatrix<f64> {
        let p = &self.params;
        let (n, nc, dt) = (p.horizon, self.n_controls(), p.dt);
        let e = self.terminal_error(ro.states.last().expect("non-empty"));
        let sn = ro.sens.last().expect("non-empty");
        let pf = DMatrix::from_diagonal(&DVector::from_row_slice(&p.p_f));
        let mut hess = sn.transpose() * &pf * sn * 2.0;
        for k in 0..nc {
            hess[(k, k)] += 2.0 * p.q_u[k % 2];
        }
        // suffix sums over k > m of v_k cos(theta_k) and v_k sin(theta_k)
        let mut cx = vec![0.0; n + 1];
        let mut sy = vec![0.0; n + 1];
        for k in (0..n).rev() {
            let (s, c) = ro.states[k].theta.sin_cos();
            cx[k] = cx[k + 1] + z[2 * k] * c;
            sy[k] = sy[k + 1] + z[2 * k] * s;
        }
        let (wx, wy) = (2.0 * p.p_f[0] * e[0], 2.0 * p.p_f[1] * e[1]);
        for k in 0..n {
            let (s, c) = ro.states[k].theta.sin_cos();
            let d_vw = dt * dt * (-wx * s + wy * c);
            for j in 0..k {
                hess[(2 * k, 2 * j + 1)] += d_vw;
                hess[(2 * j + 1, 2 * k)] += d_vw;
            }
        }
        for i in 0..n {
            for j in 0..n {
                let m = i.max(j);
                hess[(2 * i + 1, 2 * j + 1)] -= dt.powi(3) * (wx * cx[m + 1] + wy * sy[m + 1]);
            }
        }
        hess
    }

    /// `exact_control_hessian` with eigenvalues clamped so the QP stays convex.
    fn control_hessian(&self, z: &[f64], ro: &Rollout) -> DMatrix<f64> {
        let floor = self.params.q_u[0].min(self.params.q_u[1]);
        let mut eig = self.exact_control_hessian(z, ro).symmetric_eigen();
        for l in eig.eigenvalues.iter_mut() {
            *l = l.max(floor);
        }
        eig.recompose()
    }

    fn violation(c: &[f64], margin: f64) -> f64 {
        c.iter().map(|v| (margin - v).max(0.0)).sum()
    }

    /// Smallest slacks making `z`'s controls satisfy every row with `margin`.
    fn feasible_slacks(&self, z: &mut [f64], margin: f64) {
        let nc = self.n_controls();
        for s in &mut z[nc..] {
            *s = 0.0;
        }
        let c = self.constraints(z);
        let n = self.params.horizon;
        for i in 0..self.obstacles.len() {
            let worst = c[i * n..(i + 1) * n].iter().fold(0.0f64, |m, v| m.max(margin - v));
            z[nc + i] = worst;
        }
    }

    /// SQP from the control guess `u_init` (length 2N; clamped to the box).
    pub fn solve(&self, u_init: &[f64]) -> NmpcSolution {
        let p = &self.params;
        let nc = self.n_controls();
        let nv = self.n_vars();
        let m = self.n_constraints();
        let mut z = vec![0.0; nv];
        for k in 0..nc {
            let lim = if k % 2 == 0 { p.v_max } else { p.omega_max };
            z[k] = u_init.get(k).copied().unwrap_or(0.0).clamp(-lim, lim);
        }
        self.feasible_slacks(&mut z, QP_MARGIN);
        let nu_merit = 10.0 * p.slack_weight;
        let merit = |z: &[f64]| {
            let c = self.constraints(z);
            self.objective(z) + nu_merit * Self::violation(&c, QP_MARGIN)
        };
        let mut mu = 1e-6;
        let mut iterations = 0;
        let mut converged = false;
        while iterations < p.max_iterations {
            iterations += 1;
            let ro = self.rollout(&z);
            let g = self.gradient_with(&z, &ro);
            let c = self.constraints_with(&z, &ro.states);
            let jac = self.jacobian_with(&ro);
            let mut h = DMatrix::zeros(nv, nv);
            h.view_mut((0, 0), (nc, nc)).copy_from(&self.control_hessian(&z, &ro));
            for k in 0..nc {
                h[(k, k)] += mu;
            }
            for k in nc..nv {
                h[(k, k)] += 2.0 * SLACK_QUAD + mu;
            }
            // inequality rows A d <= b
            let rows = m + 2 * nc + (nv - nc);
            let mut a = vec![0.0; rows * nv];
            let mut b = vec![0.0; rows];
            for r in 0..m {
                for col in 0..nv {
                    a[r * nv + col] = -jac[(r, col)];
                }
                b[r] = c[r] - QP_MARGIN;
            }
            for k in 0..nc {
                let lim = if k % 2 == 0 { p.v_max } else { p.omega_max };
                let r = m + 2 * k;
                a[r * nv + k] = 1.0;
                b[r] = lim - z[k];
                a[(r + 1) * nv + k] = -1.0;
                b[r + 1] = lim + z[k];
            }
            for k in nc..nv {
                let r = m + nc + k;
                a[r * nv + k] = -1.0;
                b[r] = z[k];
            }
            // tolerate round-off making the current point look infeasible
            for v in &mut b[m..] {
                *v = v.max(0.0);
            }
            let mut q: Vec<f64> = (0..nv * nv).map(|k| h[(k / nv, k % nv)]).collect();
            let sol = match quadprog::solve_qp(&mut q, &g, &a, &b, 0, false) {
                Ok(s) => s,
                Err(_) => {
                    mu *= 10.0;
                    if mu > 1e6 {
                        break;
                    }
                    continue;
                }
            };
            let d = sol.sol;
            let dmax = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            // QP stationarity gives g + A'y = -H d, so |H d| is the KKT residual;
            // slacks have almost no curvature and are checked on the step itself
            let hd = &h * DVector::from_column_slice(&d);
            let kkt = (0..nv).fold(0.0f64, |acc, k| acc.max(if k < nc { hd[k].abs() } else { d[k].abs() }));
            if kkt <= p.tolerance {
                for (zi, di) in z.iter_mut().zip(&d) {
                    *zi += di;
                }
                converged = true;
                break;
            }
            let phi0 = merit(&z);
            let viol0 = Self::violation(&c, QP_MARGIN);
            let slope = g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() - nu_merit * viol0;
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= 1.0 / 64.0 {
                let trial: Vec<f64> = z.iter().zip(&d).map(|(zi, di)| zi + alpha * di).collect();
                let phi = merit(&trial);
                if phi <= phi0 + 1e-4 * alpha * slope.min(0.0) {
                    accepted = Some((trial, phi));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((trial, phi)) => {
                    let step = alpha * dmax;
                    z = trial;
                    mu = (mu * 0.1).max(1e-6);
                    if step <= 1e-9 || (phi0 - phi).abs() <= MERIT_STALL * (1.0 + phi0.abs()) {
                        converged = true;
                        break;
                    }
                }
                None => {
                    mu *= 10.0;
                    if mu > 1e6 {
                        break;
                    }
                }
            }
        }
        self.finish(z, iterations, converged)
    }

    fn finish(&self, mut z: Vec<f64>, iterations: usize, converged: bool) -> NmpcSolution {
        let p = &self.params;
        let nc = self.n_controls();
        for k in 0..nc {
            let lim = if k % 2 == 0 { p.v_max } else { p.omega_max };
            z[k] = z[k].clamp(-lim, lim);
        }
        // slacks only need to cover the remaining violation
        self.feasible_slacks(&mut z, 0.0);
        let xs = self.rollout_states(&z);
        let max_slack = z[nc..].iter().fold(0.0f64, |a, s| a.max(*s));
        let mut min_barrier = f64::INFINITY;
        let mut inside_at_start = false;
        for pred in &self.obstacles.predictions {
            inside_at_start |= barrier(xs[0].position(), pred[0], p.d_safe) < 0.0;
            for (k, x) in xs.iter().enumerate() {
                min_barrier = min_barrier.min(barrier(x.position(), pred[k], p.d_safe));
            }
        }
        let status = match (converged, inside_at_start, max_slack > SLACK_TOLERANCE) {
            (false, _, _) => SolveStatus::MaxIterations,
            (true, true, _) => SolveStatus::Relaxed,
            (true, false, false) => SolveStatus::Optimal,
            (true, false, true) => SolveStatus::Infeasible,
        };
        let controls = self.controls(&z);
        NmpcSolution {
            control: controls[0],
            objective: self.objective(&z),
            controls,
            trajectory: xs,
            status,
            iterations,
            max_slack,
            min_barrier,
        }
    }
}

/// Minimum over obstacles and steps of `h_i(x_k) - (1 - lambda)^k h_i(x_0)`;
/// `None` without obstacles. Non-negative when the horizon honors the barrier decay.
pub fn decay_margin(trajectory: &[Pose2D], obstacles: &ObstacleSet, params: &NmpcParams) -> Option<f64> {
    obstacles
        .predictions
        .iter()
        .flat_map(|pred| {
            let h0 = barrier(trajectory[0].position(), pred[0], params.d_safe);
            trajectory.iter().zip(pred).enumerate().map(move |(k, (x, q))| {
                barrier(x.position(), *q, params.d_safe) - (1.0 - params.lambda).powi(k as i32) * h0
            })
        })
        .reduce(f64::min)
}

/// One-shot solve from a cold start.
pub fn solve_nmpc(
    x_init: &RobotState,
    goal: &Pose2D,
    obstacles: &ObstacleSet,
    params: &NmpcParams,
) -> Result<NmpcSolution, NmpcError> {
    NmpcSolver::new(params.clone())?.solve(x_init, goal, obstacles)
}

/// Solver with a warm-start buffer carried between control cycles.
#[derive(Debug, Clone)]
pub struct NmpcSolver {
    params: NmpcParams,
    warm: Option<Vec<f64>>,
}

impl NmpcSolver {
    pub fn new(params: NmpcParams) -> Result<Self, NmpcError> {
        params.validate()?;
        Ok(NmpcSolver { params, warm: None })
    }

    pub fn params(&self) -> &NmpcParams {
        &self.params
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn solve(&mut self, x_init: &RobotState, goal: &Pose2D, obstacles: &ObstacleSet) -> Result<NmpcSolution, NmpcError> {
        self.solve_limited(x_init, goal, obstacles, self.params.v_max)
    }

    /// Solve with the speed bound lowered to `v_max` for this cycle.
    pub fn solve_limited(
        &mut self,
        x_init: &RobotState,
        goal: &Pose2D,
        obstacles: &ObstacleSet,
        v_max: f64,
    ) -> Result<NmpcSolution, NmpcError> {
        let x = x_init.pose;
        if !(x.x.is_finite() && x.y.is_finite() && x.theta.is_finite()) {
            return Err(NmpcError::NonFiniteState);
        }
        let mut params = self.params.clone();
        params.v_max = v_max.clamp(1e-3, self.params.v_max);
        let problem = NmpcProblem {
            x0: x,
            goal: *goal,
            obstacles: obstacles.clone(),
            params,
        };
        let init = self.warm.clone().unwrap_or_else(|| vec![0.0; problem.n_controls()]);
        let sol = problem.solve(&init);
        // shift by one step for the next cycle
        let mut next: Vec<f64> = sol.controls.iter().skip(1).flat_map(|u| [u.v, u.omega]).collect();
        next.extend([sol.controls.last().map_or(0.0, |u| u.v), 0.0]);
        self.warm = Some(next);
        Ok(sol)
    }
}
