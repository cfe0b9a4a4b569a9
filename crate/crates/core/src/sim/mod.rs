//! Simulation harness: synthetic scenes, noisy observations with window
//! queries, supervised alignment training and comparative evaluation.

pub mod bench;
pub mod eval;
pub mod observe;
pub mod persist;
pub mod records;
pub mod scene;
pub mod train;

pub use bench::{Benchmark, Split};
pub use eval::{
    anchor_errors, evaluate, weight_report, ErrorStats, EvalReport, FilterConfig, LatencyReport, Method, MethodRow,
    MethodSet, WeightReport, WeightRow, CSV_HEADER,
};
pub use observe::{observe, window_features, NoiseConfig, ObservedScene, WindowEncoder, WINDOW, WINDOW_DIM};
pub use persist::{load_model, save_hat_model, save_implicit_model, SavedModel};
pub use records::{scene_records, FrameRecord, ObjectRecord, PoseRecord};
pub use scene::{
    generate_scene, generate_scenes, scene_seed, stream_rng, switching_scene, EgoConfig, ObjectTrack, RegimeMix,
    RegimeSegment, Scene, SceneConfig,
};
pub use train::{
    alignment_loss, build_samples, dataset_loss, train, train_hat, Aligner, HatModel, ImplicitModel, SampleSet,
    TrainOptions, TrainReport,
};

use thiserror::Error;

use crate::baselines::BaselineError;
use crate::hat::HatError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("training diverged in epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Hat(#[from] HatError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

impl From<crate::geometry::GeometryError> for SimError {
    fn from(e: crate::geometry::GeometryError) -> Self {
        Self::Hat(e.into())
    }
}

impl From<crate::motion::MotionError> for SimError {
    fn from(e: crate::motion::MotionError) -> Self {
        Self::Hat(e.into())
    }
}

impl From<crate::tensor::TensorError> for SimError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Hat(e.into())
    }
}

impl SimError {
    /// Whether the failure is numerical rather than a bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SimError::Diverged { .. }
                | SimError::Baseline(BaselineError::Numerical(_))
                | SimError::Hat(HatError::DegenerateYaw { .. })
                | SimError::Baseline(BaselineError::Hat(HatError::DegenerateYaw { .. }))
        )
    }
}
