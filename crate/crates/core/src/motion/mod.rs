//! Motion model library: closed-form single-step transitions for
//! CV, STATIC, CA, CTRV and CTRA, plus the latent acceleration / yaw-rate
//! head and an RK4 reference integrator.

mod dual;
mod head;
mod oracle;

pub use dual::{Dual, Real};
pub use head::{decode_latents, BoundLatentHead, LatentHead, LATENT_DIM};
pub use oracle::integrate_oracle;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Anchor, ANCHOR_DIM};

/// Below this |ω| (rad/s) the turning models take the straight-line branch.
pub const OMEGA_EPS: f64 = 1e-6;
/// Bound on every latent kinematic quantity.
pub const LATENT_BOUND: f64 = 0.1;
/// Below this |ω·Δt| the turn integrals switch to their Taylor series.
const SERIES_EPS: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("latent {name} = {value} outside ±{LATENT_BOUND}")]
    LatentOutOfBounds { name: &'static str, value: f64 },
    #[error("integration needs at least one step")]
    NoSteps,
    #[error("unknown motion model '{0}'")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionModelKind {
    Cv,
    Static,
    Ca,
    Ctrv,
    Ctra,
}

impl MotionModelKind {
    /// Library order; position in this list is the hypothesis index.
    pub const ALL: [MotionModelKind; 5] = [Self::Cv, Self::Static, Self::Ca, Self::Ctrv, Self::Ctra];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cv => "cv",
            Self::Static => "static",
            Self::Ca => "ca",
            Self::Ctrv => "ctrv",
            Self::Ctra => "ctra",
        }
    }

    pub fn is_turning(self) -> bool {
        matches!(self, Self::Ctrv | Self::Ctra)
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Self::Cv | Self::Ca)
    }
}

impl fmt::Display for MotionModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionModelKind {
    type Err = MotionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MotionError::UnknownKind(s.to_string()))
    }
}

/// Unobservable kinematics decoded from an instance query.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentKinematics {
    /// CA acceleration components (m/s²)
    pub ax: f64,
    pub ay: f64,
    /// CTRA tangential acceleration (m/s²)
    pub a: f64,
    /// CTRV/CTRA yaw rate (rad/s)
    pub omega: f64,
}

impl LatentKinematics {
    pub fn new(ax: f64, ay: f64, a: f64, omega: f64) -> Result<Self, MotionError> {
        let l = Self { ax, ay, a, omega };
        l.validate()?;
        Ok(l)
    }

    pub fn to_array(self) -> [f64; LATENT_DIM] {
        [self.ax, self.ay, self.a, self.omega]
    }

    pub fn from_array(v: [f64; LATENT_DIM]) -> Self {
        Self { ax: v[0], ay: v[1], a: v[2], omega: v[3] }
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        for (name, value) in [("ax", self.ax), ("ay", self.ay), ("a", self.a), ("omega", self.omega)] {
            if !(value.abs() <= LATENT_BOUND) {
                return Err(MotionError::LatentOutOfBounds { name, value });
            }
        }
        Ok(())
    }
}

/// `∫₀¹ cos(φs) ds`, `∫₀¹ sin(φs) ds`, `∫₀¹ s·cos(φs) ds`, `∫₀¹ s·sin(φs) ds`.
pub(crate) fn turn_integrals<S: Real>(phi: S) -> [S; 4] {
    if phi.val().abs() < SERIES_EPS {
        let p2 = phi * phi;
        let poly = |c: [f64; 4]| {
            S::cst(c[0]) + p2 * (S::cst(c[1]) + p2 * (S::cst(c[2]) + p2 * S::cst(c[3])))
        };
        [
            poly([1.0, -1.0 / 6.0, 1.0 / 120.0, -1.0 / 5040.0]),
            phi * poly([0.5, -1.0 / 24.0, 1.0 / 720.0, -1.0 / 40320.0]),
            poly([0.5, -1.0 / 8.0, 1.0 / 144.0, -1.0 / 5760.0]),
            phi * poly([1.0 / 3.0, -1.0 / 30.0, 1.0 / 840.0, -1.0 / 45360.0]),
        ]
    } else {
        let (s, c) = (phi.sin(), phi.cos());
        let half = phi.scale(0.5).sin();
        let p2 = phi * phi;
        [
            s / phi,
            half * half.scale(2.0) / phi,
            (phi * s + c - S::cst(1.0)) / p2,
            (s - phi * c) / p2,
        ]
    }
}

/// Planar displacement of a body moving at speed `v + a·τ` with heading
/// `θ + ω·τ` over `τ ∈ [0, dt]`.
pub(crate) fn turn_displacement<S: Real>(v: S, a: S, heading: S, omega: S, dt: f64) -> (S, S) {
    let [ic, is, isc, iss] = turn_integrals(omega.scale(dt));
    let (ch, sh) = (heading.cos(), heading.sin());
    let lin = v.scale(dt);
    let quad = a.scale(dt * dt);
    let dx = lin * (ch * ic - sh * is) + quad * (ch * isc - sh * iss);
    let dy = lin * (sh * ic + ch * is) + quad * (sh * isc + ch * iss);
    (dx, dy)
}

/// Closed-form transition over anchor values with generic latents; the
/// basis of both [`predict`] and its Jacobian.
pub(crate) fn predict_generic<S: Real>(kind: MotionModelKind, b: &[f64; ANCHOR_DIM], dt: f64, lat: [S; LATENT_DIM]) -> [S; ANCHOR_DIM] {
    let c = |i: usize| S::cst(b[i]);
    let mut out: [S; ANCHOR_DIM] = std::array::from_fn(c);
    let [ax, ay, acc, omega] = lat;
    match kind {
        MotionModelKind::Cv => {
            out[0] = S::cst(b[0] + b[8] * dt);
            out[1] = S::cst(b[1] + b[9] * dt);
        }
        MotionModelKind::Static => {
            out[8] = S::cst(0.0);
            out[9] = S::cst(0.0);
        }
        MotionModelKind::Ca => {
            let half_dt2 = 0.5 * dt * dt;
            out[0] = S::cst(b[0] + b[8] * dt) + ax.scale(half_dt2);
            out[1] = S::cst(b[1] + b[9] * dt) + ay.scale(half_dt2);
            out[8] = c(8) + ax.scale(dt);
            out[9] = c(9) + ay.scale(dt);
        }
        MotionModelKind::Ctrv | MotionModelKind::Ctra => {
            let v = b[8].hypot(b[9]);
            let theta = b[7].atan2(b[6]);
            let a = if kind == MotionModelKind::Ctra { acc } else { S::cst(0.0) };
            if omega.val().abs() < OMEGA_EPS {
                if kind == MotionModelKind::Ctrv {
                    out[0] = S::cst(b[0] + b[8] * dt);
                    out[1] = S::cst(b[1] + b[9] * dt);
                } else {
                    let s = S::cst(v * dt) + a.scale(0.5 * dt * dt);
                    out[0] = c(0) + s.scale(theta.cos());
                    out[1] = c(1) + s.scale(theta.sin());
                }
            } else {
                let (dx, dy) = turn_displacement(S::cst(v), a, S::cst(theta), omega, dt);
                out[0] = c(0) + dx;
                out[1] = c(1) + dy;
            }
            let heading = S::cst(theta) + omega.scale(dt);
            let speed = S::cst(v) + a.scale(dt);
            let (ch, sh) = (heading.cos(), heading.sin());
            out[6] = ch;
            out[7] = sh;
            out[8] = speed * ch;
            out[9] = speed * sh;
        }
    }
    out
}

fn check_inputs(dt: f64, lat: &LatentKinematics) -> Result<(), MotionError> {
    if !(dt > 0.0) {
        return Err(MotionError::NonPositiveDt(dt));
    }
    lat.validate()
}

/// Object-motion-compensated anchor after `dt`, still in the source frame.
pub fn predict(kind: MotionModelKind, a: &Anchor, dt: f64, lat: &LatentKinematics) -> Result<Anchor, MotionError> {
    check_inputs(dt, lat)?;
    Ok(Anchor::from_array(&predict_generic(kind, &a.to_array(), dt, lat.to_array())))
}

/// Prediction plus `∂prediction/∂latents` (10×4, row-major).
pub fn predict_with_jacobian(
    kind: MotionModelKind,
    a: &Anchor,
    dt: f64,
    lat: &LatentKinematics,
) -> Result<([f64; ANCHOR_DIM], [[f64; LATENT_DIM]; ANCHOR_DIM]), MotionError> {
    check_inputs(dt, lat)?;
    let l = lat.to_array();
    let duals: [Dual<LATENT_DIM>; LATENT_DIM] = std::array::from_fn(|i| Dual::var(l[i], i));
    let out = predict_generic(kind, &a.to_array(), dt, duals);
    Ok((out.map(|d| d.v), out.map(|d| d.d)))
}
