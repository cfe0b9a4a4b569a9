//! Extended Kalman filters over the common state `[x, y, θ, v, ω, a]`.
//!
//! Every model shares the state layout; a model pins the components it does
//! not carry to zero (CV: ω, a; STATIC: v, ω, a; CA: ω; CTRV: a). Turning
//! models are linearised with forward-mode derivatives of the closed-form
//! transition.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::geometry::Anchor;
use crate::motion::{turn_displacement, Dual, MotionModelKind, Real};

pub const STATE_DIM: usize = 6;
pub const OBS_DIM: usize = 6;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Continuous white-noise intensities (std per √s) on each state component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessNoise {
    pub position: f64,
    pub heading: f64,
    pub speed: f64,
    pub yaw_rate: f64,
    pub accel: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        Self { position: 0.05, heading: 0.01, speed: 0.3, yaw_rate: 0.05, accel: 0.2 }
    }
}

impl ProcessNoise {
    pub fn zero() -> Self {
        Self { position: 0.0, heading: 0.0, speed: 0.0, yaw_rate: 0.0, accel: 0.0 }
    }

    fn diagonal(&self, kind: MotionModelKind, dt: f64) -> StateMatrix {
        let mut s = [self.position, self.position, self.heading, self.speed, self.yaw_rate, self.accel];
        for &i in pinned(kind) {
            s[i] = 0.0;
        }
        StateMatrix::from_diagonal(&SVector::from(s.map(|v| v * v * dt)))
    }
}

/// Observation noise std on `[x, y, cosθ, sinθ, vx, vy]`. Infinite entries
/// drop that component from the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementNoise {
    pub std: [f64; OBS_DIM],
}

impl MeasurementNoise {
    pub fn new(position: f64, yaw: f64, velocity: f64) -> Self {
        Self { std: [position, position, yaw, yaw, velocity, velocity] }
    }
}

fn pinned(kind: MotionModelKind) -> &'static [usize] {
    match kind {
        MotionModelKind::Cv => &[4, 5],
        MotionModelKind::Static => &[3, 4, 5],
        MotionModelKind::Ca => &[4],
        MotionModelKind::Ctrv => &[5],
        MotionModelKind::Ctra => &[],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateMatrix,
    pub kind: MotionModelKind,
}

fn transition<S: Real>(kind: MotionModelKind, s: [S; STATE_DIM], dt: f64) -> [S; STATE_DIM] {
    let [x, y, th, v, w, a] = s;
    let zero = S::cst(0.0);
    match kind {
        MotionModelKind::Static => [x, y, th, zero, zero, zero],
        MotionModelKind::Cv => {
            let d = v.scale(dt);
            [x + d * th.cos(), y + d * th.sin(), th, v, zero, zero]
        }
        MotionModelKind::Ca => {
            let d = v.scale(dt) + a.scale(0.5 * dt * dt);
            [x + d * th.cos(), y + d * th.sin(), th, v + a.scale(dt), zero, a]
        }
        MotionModelKind::Ctrv => {
            let (dx, dy) = turn_displacement(v, zero, th, w, dt);
            [x + dx, y + dy, th + w.scale(dt), v, w, zero]
        }
        MotionModelKind::Ctra => {
            let (dx, dy) = turn_displacement(v, a, th, w, dt);
            [x + dx, y + dy, th + w.scale(dt), v + a.scale(dt), w, a]
        }
    }
}

fn observe<S: Real>(s: [S; STATE_DIM]) -> [S; OBS_DIM] {
    let (c, sn) = (s[2].cos(), s[2].sin());
    [s[0], s[1], c, sn, s[3] * c, s[3] * sn]
}

fn linearise<const M: usize>(
    f: impl Fn([Dual<STATE_DIM>; STATE_DIM]) -> [Dual<STATE_DIM>; M],
    x: &StateVector,
) -> (SVector<f64, M>, SMatrix<f64, M, STATE_DIM>) {
    let duals = std::array::from_fn(|i| Dual::var(x[i], i));
    let out = f(duals);
    let value = SVector::from(out.map(|d| d.v));
    let jac = SMatrix::from_fn(|r, c| out[r].d[c]);
    (value, jac)
}

pub fn wrap_angle(a: f64) -> f64 {
    let t = (a + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU);
    t - std::f64::consts::PI
}

fn symmetrize(p: &StateMatrix) -> StateMatrix {
    (p + p.transpose()) * 0.5
}

impl KalmanState {
    /// State from an observed anchor: heading from the yaw vector, signed
    /// speed along it, zero turn rate and acceleration.
    pub fn from_anchor(kind: MotionModelKind, obs: &Anchor, initial_std: [f64; STATE_DIM]) -> Self {
        let th = obs.heading();
        let v = obs.velocity[0] * th.cos() + obs.velocity[1] * th.sin();
        let mut mean = StateVector::from([obs.position[0], obs.position[1], th, v, 0.0, 0.0]);
        let mut var = initial_std.map(|s| s * s);
        for &i in pinned(kind) {
            mean[i] = 0.0;
            var[i] = 0.0;
        }
        let covariance = StateMatrix::from_diagonal(&SVector::from(var));
        Self { mean, covariance, kind }
    }

    /// Anchor carrying this state's planar kinematics; z and size copied
    /// from `template`.
    pub fn to_anchor(&self, template: &Anchor) -> Anchor {
        let m = &self.mean;
        let (s, c) = m[2].sin_cos();
        Anchor {
            position: [m[0], m[1], template.position[2]],
            size: template.size,
            yaw: [c, s],
            velocity: [m[3] * c, m[3] * s],
        }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        let asym = (self.covariance - self.covariance.transpose()).amax();
        if asym > 1e-9 * (1.0 + self.covariance.amax()) {
            return Err(BaselineError::Numerical(format!("covariance asymmetric by {asym:.3e}")));
        }
        let min_eig = self.covariance.symmetric_eigenvalues().min();
        if min_eig < -1e-10 * (1.0 + self.covariance.amax()) {
            return Err(BaselineError::Numerical(format!("covariance has eigenvalue {min_eig:.3e}")));
        }
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(BaselineError::Numerical("non-finite state".into()));
        }
        Ok(())
    }
}

pub fn kf_predict(s: &KalmanState, dt: f64, noise: &ProcessNoise) -> Result<KalmanState, BaselineError> {
    if !(dt > 0.0) {
        return Err(BaselineError::Contract(format!("time step must be positive, got {dt}")));
    }
    let kind = s.kind;
    let (mean, f) = linearise(|x| transition(kind, x, dt), &s.mean);
    let covariance = symmetrize(&(f * s.covariance * f.transpose() + noise.diagonal(kind, dt)));
    Ok(KalmanState { mean, covariance, kind })
}

/// Innovation statistics of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateInfo {
    /// `log N(y; 0, S)` over the components actually used
    pub log_likelihood: f64,
    pub used_components: usize,
}

pub fn kf_update(s: &KalmanState, obs: &Anchor, noise: &MeasurementNoise) -> Result<KalmanState, BaselineError> {
    kf_update_with_info(s, obs, noise).map(|(s, _)| s)
}

/// Inverse and log-determinant of a symmetric PSD matrix; singular
/// directions (eigenvalue ≤ tol) are projected out.
fn psd_inverse(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64, usize), BaselineError> {
    if let Some(ch) = s.clone().cholesky() {
        let logdet = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        return Ok((ch.inverse(), logdet, s.nrows()));
    }
    let eig = s.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let tol = 1e-12 * scale;
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(BaselineError::Numerical(format!(
            "innovation covariance is not positive semi-definite (min eigenvalue {min:.3e}, eigenvalues {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let n = s.nrows();
    let mut inv = DMatrix::zeros(n, n);
    let mut logdet = 0.0;
    let mut rank = 0;
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > tol {
            let u = eig.eigenvectors.column(k);
            inv += (u * u.transpose()) / l;
            logdet += l.ln();
            rank += 1;
        }
    }
    Ok((inv, logdet, rank))
}

pub fn kf_update_with_info(
    s: &KalmanState,
    obs: &Anchor,
    noise: &MeasurementNoise,
) -> Result<(KalmanState, UpdateInfo), BaselineError> {
    let used: Vec<usize> = (0..OBS_DIM).filter(|&i| noise.std[i].is_finite()).collect();
    if used.is_empty() {
        return Ok((s.clone(), UpdateInfo { log_likelihood: 0.0, used_components: 0 }));
    }
    if noise.std.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(BaselineError::Contract(format!("invalid measurement noise {:?}", noise.std)));
    }
    let z = [obs.position[0], obs.position[1], obs.yaw[0], obs.yaw[1], obs.velocity[0], obs.velocity[1]];
    let (pred, h_full) = linearise(observe, &s.mean);
    let k = used.len();
    let h = DMatrix::from_fn(k, STATE_DIM, |r, c| h_full[(used[r], c)]);
    let y = DVector::from_fn(k, |r, _| z[used[r]] - pred[used[r]]);
    let r = DMatrix::from_fn(k, k, |a, b| if a == b { noise.std[used[a]].powi(2) } else { 0.0 });
    let p = DMatrix::from_fn(STATE_DIM, STATE_DIM, |a, b| s.covariance[(a, b)]);
    let sm = &h * &p * h.transpose() + &r;
    let sm = (&sm + sm.transpose()) * 0.5;
    let (s_inv, logdet, rank) = psd_inverse(&sm)?;
    let gain = &p * h.transpose() * &s_inv;
    let mut mean = s.mean;
    let dx = &gain * &y;
    for i in 0..STATE_DIM {
        mean[i] += dx[i];
    }
    mean[2] = wrap_angle(mean[2]);
    for &i in pinned(s.kind) {
        mean[i] = 0.0;
    }
    let ikh = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM) - &gain * &h;
    let joseph = &ikh * &p * ikh.transpose() + &gain * &r * gain.transpose();
    let covariance = symmetrize(&StateMatrix::from_fn(|a, b| joseph[(a, b)]));
    let maha = (y.transpose() * &s_inv * &y)[(0, 0)];
    let log_likelihood = -0.5 * (maha + logdet + rank as f64 * (std::f64::consts::TAU).ln());
    let out = KalmanState { mean, covariance, kind: s.kind };
    Ok((out, UpdateInfo { log_likelihood, used_components: rank }))
}
