//! Fixed-step RK4 integration of the continuous kinematics, used as an
//! independent reference for the closed-form transitions.

use super::{LatentKinematics, MotionError, MotionModelKind};
use crate::geometry::Anchor;

fn rk4<const N: usize>(mut s: [f64; N], h: f64, steps: usize, f: impl Fn(&[f64; N]) -> [f64; N]) -> [f64; N] {
    let axpy = |s: &[f64; N], k: &[f64; N], c: f64| -> [f64; N] { std::array::from_fn(|i| s[i] + c * k[i]) };
    for _ in 0..steps {
        let k1 = f(&s);
        let k2 = f(&axpy(&s, &k1, h / 2.0));
        let k3 = f(&axpy(&s, &k2, h / 2.0));
        let k4 = f(&axpy(&s, &k3, h));
        for i in 0..N {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    s
}

/// RK4 with `steps` equal substeps over `dt`.
///
/// CV, CA and STATIC integrate `(x, y, vx, vy)` in component form; CTRV and
/// CTRA integrate `(x, y, v, θ)` with `ẋ = v cosθ, ẏ = v sinθ, v̇ = a, θ̇ = ω`.
pub fn integrate_oracle(
    kind: MotionModelKind,
    a: &Anchor,
    dt: f64,
    lat: &LatentKinematics,
    steps: usize,
) -> Result<Anchor, MotionError> {
    if steps == 0 {
        return Err(MotionError::NoSteps);
    }
    if !(dt > 0.0) {
        return Err(MotionError::NonPositiveDt(dt));
    }
    let h = dt / steps as f64;
    let mut out = *a;
    match kind {
        MotionModelKind::Cv | MotionModelKind::Ca | MotionModelKind::Static => {
            let (ax, ay) = if kind == MotionModelKind::Ca { (lat.ax, lat.ay) } else { (0.0, 0.0) };
            let v0 = if kind == MotionModelKind::Static { [0.0, 0.0] } else { a.velocity };
            let s = rk4([a.position[0], a.position[1], v0[0], v0[1]], h, steps, |s| [s[2], s[3], ax, ay]);
            out.position[0] = s[0];
            out.position[1] = s[1];
            out.velocity = [s[2], s[3]];
        }
        MotionModelKind::Ctrv | MotionModelKind::Ctra => {
            let acc = if kind == MotionModelKind::Ctra { lat.a } else { 0.0 };
            let w = lat.omega;
            let s0 = [a.position[0], a.position[1], a.speed(), a.heading()];
            let s = rk4(s0, h, steps, |s| [s[2] * s[3].cos(), s[2] * s[3].sin(), acc, w]);
            let (sn, cs) = s[3].sin_cos();
            out.position[0] = s[0];
            out.position[1] = s[1];
            out.yaw = [cs, sn];
            out.velocity = [s[2] * cs, s[2] * sn];
        }
    }
    Ok(out)
}
