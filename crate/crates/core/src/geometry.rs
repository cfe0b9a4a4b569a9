//! Anchor representation and inter-frame warping.
//!
//! An anchor is the 10-vector `[x, y, z, w, l, h, cosθ, sinθ, vx, vy]`.
//! Warping applies the augmented extrinsic
//! `Diag(R, I₃, R[:2,:2], R[:2,:2])` and translation `[T; 0₇]`, so sizes
//! are copied untouched and velocities are rotated but never offset by ego
//! translation.

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROTATION_TOL: f64 = 1e-9;
pub const MIN_YAW_NORM: f64 = 1e-6;
pub const ANCHOR_DIM: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (|RᵀR − I| = {orthogonality:.3e}, det = {det:.12})")]
    InvalidRotation { orthogonality: f64, det: f64 },
    #[error("degenerate yaw vector with norm {norm:.3e}")]
    DegenerateYaw { norm: f64 },
    #[error("invalid anchor: {0}")]
    InvalidAnchor(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub position: [f64; 3],
    pub size: [f64; 3],
    /// `(cosθ, sinθ)`
    pub yaw: [f64; 2],
    pub velocity: [f64; 2],
}

impl Anchor {
    pub fn new(position: [f64; 3], size: [f64; 3], heading: f64, velocity: [f64; 2]) -> Self {
        Self { position, size, yaw: [heading.cos(), heading.sin()], velocity }
    }

    pub fn from_array(v: &[f64; ANCHOR_DIM]) -> Self {
        Self {
            position: [v[0], v[1], v[2]],
            size: [v[3], v[4], v[5]],
            yaw: [v[6], v[7]],
            velocity: [v[8], v[9]],
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, GeometryError> {
        let arr: [f64; ANCHOR_DIM] = v
            .try_into()
            .map_err(|_| GeometryError::InvalidAnchor(format!("expected 10 values, got {}", v.len())))?;
        Ok(Self::from_array(&arr))
    }

    pub fn to_array(&self) -> [f64; ANCHOR_DIM] {
        let (p, d, y, v) = (self.position, self.size, self.yaw, self.velocity);
        [p[0], p[1], p[2], d[0], d[1], d[2], y[0], y[1], v[0], v[1]]
    }

    /// Heading angle as a view of the stored yaw vector.
    pub fn heading(&self) -> f64 {
        self.yaw[1].atan2(self.yaw[0])
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn yaw_norm(&self) -> f64 {
        self.yaw[0].hypot(self.yaw[1])
    }

    /// Checks the canonical-anchor invariants: positive sizes, unit yaw.
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidAnchor("non-finite component".into()));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::InvalidAnchor(format!("non-positive size {:?}", self.size)));
        }
        if (self.yaw_norm() - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidAnchor(format!("yaw norm {}", self.yaw_norm())));
        }
        Ok(())
    }
}

/// Rigid transform taking coordinates of frame t−1 into frame t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl EgoTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let e = Self { rotation, translation };
        e.validate()?;
        Ok(e)
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Rotation of `yaw` radians about +z followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: [f64; 3]) -> Self {
        let (s, c) = yaw.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self { rotation, translation: Vector3::from(translation) }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        let orthogonality = (r.transpose() * r - Matrix3::identity()).amax();
        let det = r.determinant();
        let finite = r.iter().chain(self.translation.iter()).all(|v| v.is_finite());
        if !finite || orthogonality > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation { orthogonality, det });
        }
        Ok(())
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &EgoTransform) -> EgoTransform {
        compose(self, next)
    }

    pub fn inverse(&self) -> EgoTransform {
        invert(self)
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(p) + self.translation;
        [q[0], q[1], q[2]]
    }

    /// Row-major rotation entries.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }

    pub fn from_row_major(rotation: &[f64; 9], translation: [f64; 3]) -> EgoTransform {
        EgoTransform {
            rotation: Matrix3::from_row_slice(rotation),
            translation: Vector3::from(translation),
        }
    }
}

/// `e1` followed by `e2`: `x ↦ R₂(R₁x + T₁) + T₂`.
pub fn compose(e1: &EgoTransform, e2: &EgoTransform) -> EgoTransform {
    EgoTransform {
        rotation: e2.rotation * e1.rotation,
        translation: e2.rotation * e1.translation + e2.translation,
    }
}

pub fn invert(e: &EgoTransform) -> EgoTransform {
    let rt = e.rotation.transpose();
    EgoTransform { rotation: rt, translation: -(rt * e.translation) }
}

/// Block-diagonal 10×10 extrinsic and zero-padded translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedTransform {
    pub rotation: SMatrix<f64, 10, 10>,
    pub translation: SVector<f64, 10>,
    rot3: Matrix3<f64>,
    rot2: Matrix2<f64>,
}

impl AugmentedTransform {
    pub fn planar_rotation(&self) -> Matrix2<f64> {
        self.rot2
    }

    /// Recovers the rigid transform the blocks were built from.
    pub fn flatten(&self) -> EgoTransform {
        EgoTransform {
            rotation: self.rotation.fixed_view::<3, 3>(0, 0).into_owned(),
            translation: self.translation.fixed_rows::<3>(0).into_owned(),
        }
    }

    /// Applies only the linear part to a 10-vector (used to carry
    /// Jacobians through the warp).
    pub fn rotate_array(&self, b: &[f64; ANCHOR_DIM]) -> [f64; ANCHOR_DIM] {
        let (r, q) = (&self.rot3, &self.rot2);
        [
            r[(0, 0)] * b[0] + r[(0, 1)] * b[1] + r[(0, 2)] * b[2],
            r[(1, 0)] * b[0] + r[(1, 1)] * b[1] + r[(1, 2)] * b[2],
            r[(2, 0)] * b[0] + r[(2, 1)] * b[1] + r[(2, 2)] * b[2],
            b[3],
            b[4],
            b[5],
            q[(0, 0)] * b[6] + q[(0, 1)] * b[7],
            q[(1, 0)] * b[6] + q[(1, 1)] * b[7],
            q[(0, 0)] * b[8] + q[(0, 1)] * b[9],
            q[(1, 0)] * b[8] + q[(1, 1)] * b[9],
        ]
    }

    pub fn apply_array(&self, b: &[f64; ANCHOR_DIM]) -> [f64; ANCHOR_DIM] {
        let mut out = self.rotate_array(b);
        for (o, t) in out.iter_mut().zip(self.translation.iter()).take(3) {
            *o += t;
        }
        out
    }
}

pub fn build_augmented(e: &EgoTransform) -> Result<AugmentedTransform, GeometryError> {
    e.validate()?;
    let rot3 = e.rotation;
    let rot2 = rot3.fixed_view::<2, 2>(0, 0).into_owned();
    let mut rotation = SMatrix::<f64, 10, 10>::zeros();
    rotation.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot3);
    rotation.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
    rotation.fixed_view_mut::<2, 2>(6, 6).copy_from(&rot2);
    rotation.fixed_view_mut::<2, 2>(8, 8).copy_from(&rot2);
    let mut translation = SVector::<f64, 10>::zeros();
    translation.fixed_rows_mut::<3>(0).copy_from(&e.translation);
    Ok(AugmentedTransform { rotation, translation, rot3, rot2 })
}

/// `b' = R_aug·b + T_aug`.
pub fn warp_anchor(a: &Anchor, aug: &AugmentedTransform) -> Anchor {
    Anchor::from_array(&aug.apply_array(&a.to_array()))
}

pub fn yaw_normalize(a: &Anchor) -> Result<Anchor, GeometryError> {
    let norm = a.yaw_norm();
    if !(norm > MIN_YAW_NORM) {
        return Err(GeometryError::DegenerateYaw { norm });
    }
    Ok(Anchor { yaw: [a.yaw[0] / norm, a.yaw[1] / norm], ..*a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn sample_anchor() -> Anchor {
        Anchor::new([3.0, -1.5, 0.4], [1.9, 4.5, 1.6], 0.3, [4.0, 1.2])
    }

    fn random_rotation(axis: [f64; 3], angle: f64) -> Matrix3<f64> {
        let axis = Unit::new_normalize(Vector3::from(axis));
        Rotation3::from_axis_angle(&axis, angle).into_inner()
    }

    #[test]
    fn identity_augmented() {
        let aug = build_augmented(&EgoTransform::identity()).unwrap();
        assert_eq!(aug.rotation, SMatrix::<f64, 10, 10>::identity());
        assert_eq!(aug.translation, SVector::<f64, 10>::zeros());
        assert_eq!(warp_anchor(&sample_anchor(), &aug), sample_anchor());
    }

    #[test]
    fn quarter_turn_rotates_velocity() {
        let aug = build_augmented(&EgoTransform::from_yaw(FRAC_PI_2, [0.0; 3])).unwrap();
        let a = Anchor { velocity: [1.0, 0.0], ..sample_anchor() };
        let w = warp_anchor(&a, &aug);
        assert!((w.velocity[0] - 0.0).abs() < 1e-15);
        assert!((w.velocity[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_rotation_keeps_size_block_identity() {
        let e = EgoTransform::new(random_rotation([0.3, -0.2, 0.9], 1.1), Vector3::new(1.0, 2.0, 3.0)).unwrap();
        let aug = build_augmented(&e).unwrap();
        assert_eq!(aug.rotation.fixed_view::<3, 3>(3, 3).into_owned(), Matrix3::identity());
        assert_eq!(aug.translation.rows(3, 7).amax(), 0.0);
        assert_eq!(aug.flatten(), e);
    }

    #[test]
    fn non_orthonormal_rejected() {
        let mut e = EgoTransform::identity();
        e.rotation[(0, 0)] = 1.01;
        assert!(matches!(build_augmented(&e), Err(GeometryError::InvalidRotation { .. })));
        assert!(EgoTransform::new(-Matrix3::identity(), Vector3::zeros()).is_err());
    }

    #[test]
    fn pure_translation_only_moves_x() {
        let aug = build_augmented(&EgoTransform::from_yaw(0.0, [2.5, 0.0, 0.0])).unwrap();
        let a = sample_anchor();
        let w = warp_anchor(&a, &aug);
        assert_eq!(w.position[0], a.position[0] + 2.5);
        assert_eq!(&w.to_array()[1..], &{
            let mut v = a.to_array();
            v[0] = w.position[0];
            v
        }[1..]);
    }

    #[test]
    fn group_laws() {
        let id = EgoTransform::identity();
        assert_eq!(invert(&id), id);
        let a = EgoTransform::from_yaw(30f64.to_radians(), [0.0; 3]);
        let b = EgoTransform::from_yaw(60f64.to_radians(), [0.0; 3]);
        let c = compose(&a, &b);
        let want = EgoTransform::from_yaw(FRAC_PI_2, [0.0; 3]);
        assert!((c.rotation - want.rotation).amax() < 1e-12);
    }

    #[test]
    fn compose_chain_matches_homogeneous_product() {
        let chain: Vec<EgoTransform> = (0..5)
            .map(|i| {
                let f = i as f64;
                EgoTransform::new(
                    random_rotation([0.1 * f + 0.2, -0.3, 1.0], 0.4 * f - 0.7),
                    Vector3::new(f, -2.0 * f, 0.5),
                )
                .unwrap()
            })
            .collect();
        let composed = chain.iter().skip(1).fold(chain[0], |acc, e| compose(&acc, e));
        let mut dense = nalgebra::Matrix4::<f64>::identity();
        for e in &chain {
            let mut h = nalgebra::Matrix4::<f64>::identity();
            h.fixed_view_mut::<3, 3>(0, 0).copy_from(&e.rotation);
            h.fixed_view_mut::<3, 1>(0, 3).copy_from(&e.translation);
            dense = h * dense;
        }
        assert!((dense.fixed_view::<3, 3>(0, 0) - composed.rotation).amax() < 1e-12);
        assert!((dense.fixed_view::<3, 1>(0, 3) - composed.translation).amax() < 1e-12);
    }

    #[test]
    fn yaw_normalize_cases() {
        let a = Anchor { yaw: [2.0, 0.0], ..sample_anchor() };
        assert_eq!(yaw_normalize(&a).unwrap().yaw, [1.0, 0.0]);
        let a = Anchor { yaw: [0.6, 0.8], ..sample_anchor() };
        assert_eq!(yaw_normalize(&a).unwrap(), a);
        let a = Anchor { yaw: [1e-9, 0.0], ..sample_anchor() };
        assert!(matches!(yaw_normalize(&a), Err(GeometryError::DegenerateYaw { .. })));
    }

    fn arb_transform() -> impl Strategy<Value = EgoTransform> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            -3.0f64..3.0,
            prop::array::uniform3(-50.0f64..50.0),
        )
            .prop_filter_map("axis", |(axis, angle, t)| {
                let n = Vector3::from(axis).norm();
                (n > 1e-3).then(|| EgoTransform {
                    rotation: random_rotation(axis, angle),
                    translation: Vector3::from(t),
                })
            })
    }

    // Planar invariants only hold when the ego rotation is about z.
    fn arb_yaw_transform() -> impl Strategy<Value = EgoTransform> {
        (-3.2f64..3.2, prop::array::uniform3(-50.0f64..50.0))
            .prop_map(|(yaw, t)| EgoTransform::from_yaw(yaw, t))
    }

    fn arb_anchor() -> impl Strategy<Value = Anchor> {
        (
            prop::array::uniform3(-80.0f64..80.0),
            prop::array::uniform3(0.5f64..6.0),
            -3.2f64..3.2,
            prop::array::uniform2(-20.0f64..20.0),
        )
            .prop_map(|(p, d, h, v)| Anchor::new(p, d, h, v))
    }

    proptest! {
        #[test]
        fn warp_inverse_roundtrip(e in arb_yaw_transform(), a in arb_anchor()) {
            let fwd = build_augmented(&e).unwrap();
            let back = build_augmented(&invert(&e)).unwrap();
            let r = warp_anchor(&warp_anchor(&a, &fwd), &back);
            for (x, y) in r.to_array().iter().zip(a.to_array()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            let c = compose(&e, &invert(&e));
            prop_assert!((c.rotation - Matrix3::identity()).amax() <= 1e-9);
            prop_assert!(c.translation.amax() <= 1e-9);
        }

        #[test]
        fn warp_preserves_size_and_speed(e in arb_yaw_transform(), a in arb_anchor()) {
            let w = warp_anchor(&a, &build_augmented(&e).unwrap());
            prop_assert_eq!(w.size, a.size);
            prop_assert!((w.speed() - a.speed()).abs() <= 1e-12 * a.speed().max(1.0));
        }

        #[test]
        fn warp_is_affine(e in arb_transform(), a in arb_anchor(), b in arb_anchor(), alpha in -2.0f64..3.0) {
            let aug = build_augmented(&e).unwrap();
            let beta = 1.0 - alpha;
            let mix: Vec<f64> = a.to_array().iter().zip(b.to_array()).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = aug.apply_array(&mix.clone().try_into().unwrap());
            let ra = aug.rotate_array(&a.to_array());
            let rb = aug.rotate_array(&b.to_array());
            for i in 0..ANCHOR_DIM {
                let rhs = alpha * ra[i] + beta * rb[i] + aug.translation[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn dense_block_matrix_agrees_with_blockwise(e in arb_transform(), a in arb_anchor()) {
            let aug = build_augmented(&e).unwrap();
            let dense = aug.rotation * SVector::<f64, 10>::from(a.to_array()) + aug.translation;
            let fast = aug.apply_array(&a.to_array());
            for i in 0..ANCHOR_DIM {
                prop_assert!((dense[i] - fast[i]).abs() <= 1e-12 * (1.0 + fast[i].abs()));
            }
        }
    }
}
