//! Reference competitors: single-model explicit alignment, an implicit
//! query-only aligner, per-model extended Kalman filters and an IMM filter.

pub mod imm;
pub mod kalman;

pub use imm::{default_transition, imm_predict, imm_step, ImmState, ImmStepInfo, DEFAULT_SELF_TRANSITION};
pub use kalman::{
    kf_predict, kf_update, kf_update_with_info, KalmanState, MeasurementNoise, ProcessNoise, UpdateInfo,
};

use rand::Rng;
use thiserror::Error;

use crate::geometry::{build_augmented, warp_anchor, Anchor, EgoTransform, ANCHOR_DIM};
use crate::hat::{HatError, InstanceBank};
use crate::motion::{predict, LatentKinematics, MotionModelKind};
use crate::tensor::{BoundMlp, Graph, Mlp, Tensor, Var};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Hat(#[from] HatError),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("contract error: {0}")]
    Contract(String),
}

impl From<crate::geometry::GeometryError> for BaselineError {
    fn from(e: crate::geometry::GeometryError) -> Self {
        Self::Hat(e.into())
    }
}

impl From<crate::motion::MotionError> for BaselineError {
    fn from(e: crate::motion::MotionError) -> Self {
        Self::Hat(e.into())
    }
}

impl From<crate::tensor::TensorError> for BaselineError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Hat(e.into())
    }
}

/// `warp(predict(kind, anchor))` with zero latents for every instance;
/// queries are not consulted.
pub fn single_model_sta(
    kind: MotionModelKind,
    bank: &InstanceBank,
    dt: f64,
    ego: &EgoTransform,
) -> Result<Vec<Anchor>, BaselineError> {
    bank.validate()?;
    let aug = build_augmented(ego)?;
    let lat = LatentKinematics::default();
    bank.anchors.iter().map(|a| Ok(warp_anchor(&predict(kind, a, dt, &lat)?, &aug))).collect()
}

/// Query → 10-dim residual added to the ego-warped anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitParams {
    pub residual: Mlp,
}

impl ImplicitParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self { residual: Mlp::init(channels, channels, ANCHOR_DIM, rng) }
    }

    pub fn zeros(channels: usize) -> Self {
        Self { residual: Mlp::zeros(channels, channels, ANCHOR_DIM) }
    }

    pub fn channels(&self) -> usize {
        self.residual.input_dim()
    }

    pub fn tensor_names() -> Vec<String> {
        ["first.weight", "first.bias", "second.weight", "second.bias"].map(|s| format!("residual.{s}")).to_vec()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.residual.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.residual.tensors_mut()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundImplicit {
        BoundImplicit { residual: self.residual.bind(g, trainable) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundImplicit {
    pub residual: BoundMlp,
}

impl BoundImplicit {
    /// `[N, 10]` warped anchors plus `[N, C]` queries → yaw-normalised `[N, 10]`.
    pub fn forward(&self, g: &mut Graph, warped: Var, queries: Var) -> Result<Var, BaselineError> {
        let delta = self.residual.forward(g, queries)?;
        let out = g.add(warped, delta)?;
        for (instance, row) in g.value(out).data().chunks(ANCHOR_DIM).enumerate() {
            let norm = row[6].hypot(row[7]);
            if !(norm > crate::geometry::MIN_YAW_NORM) {
                return Err(HatError::DegenerateYaw { instance, norm }.into());
            }
        }
        Ok(g.yaw_normalize(out)?)
    }
}

/// Ego warp plus a learned residual from the query; no motion model, so
/// `dt` only enters through what the query has learned.
pub fn implicit_sta(
    bank: &InstanceBank,
    _dt: f64,
    ego: &EgoTransform,
    params: &ImplicitParams,
) -> Result<Vec<Anchor>, BaselineError> {
    bank.validate()?;
    if bank.queries.shape()[1] != params.channels() {
        return Err(BaselineError::Contract(format!(
            "query width {} but implicit aligner expects {}",
            bank.queries.shape()[1],
            params.channels()
        )));
    }
    let aug = build_augmented(ego)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let warped: Vec<f64> = bank.anchors.iter().flat_map(|a| warp_anchor(a, &aug).to_array()).collect();
    let w = g.constant(Tensor::new(&[bank.len(), ANCHOR_DIM], warped)?);
    let q = g.constant(bank.queries.clone());
    let out = p.forward(&mut g, w, q)?;
    Ok(g.value(out).data().chunks(ANCHOR_DIM).map(|r| Anchor::from_slice(r).expect("10-dim")).collect())
}
