//! Multiple-hypothesis spatio-temporal alignment.
//!
//! Each cached instance is propagated by every motion model of the library,
//! the hypotheses are embedded, fused with instance-conditioned dynamic
//! weights, and decoded into one anchor and one feature per instance.

mod forward;
pub mod io;
mod params;

pub use forward::{AlignVars, EMBED_INPUT_SCALE};
pub use params::{BoundHat, HatParameters, StateEncoders};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{build_augmented, Anchor, EgoTransform, GeometryError, ANCHOR_DIM};
use crate::motion::{MotionError, MotionModelKind};
use crate::tensor::{Graph, Tensor, TensorError};
use forward::{anchors_tensor, build_feature_hypotheses_var, decode_var};

#[derive(Debug, Error)]
pub enum HatError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate yaw for instance {instance} (norm {norm:.3e})")]
    DegenerateYaw { instance: usize, norm: f64 },
    #[error("parameter file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HatError>;

/// Channel width `C` and the ordered motion model library.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HatConfig {
    pub channels: usize,
    pub models: Vec<MotionModelKind>,
}

impl Default for HatConfig {
    fn default() -> Self {
        Self { channels: 32, models: MotionModelKind::ALL.to_vec() }
    }
}

impl HatConfig {
    pub fn new(channels: usize, models: Vec<MotionModelKind>) -> Result<Self> {
        let c = Self { channels, models };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(4) {
            return Err(HatError::Config(format!("channels must be a positive multiple of 4, got {}", self.channels)));
        }
        if self.models.is_empty() {
            return Err(HatError::Config("motion model list is empty".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return Err(HatError::Config(format!("motion model '{m}' listed twice")));
            }
        }
        Ok(())
    }
}

/// `K` cached (anchor, query) pairs from the historical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBank {
    pub anchors: Vec<Anchor>,
    /// `[K, C]`
    pub queries: Tensor,
}

impl InstanceBank {
    pub fn new(anchors: Vec<Anchor>, queries: Tensor) -> Result<Self> {
        let bank = Self { anchors, queries };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(HatError::Config("instance bank is empty".into()));
        }
        if self.queries.rank() != 2 || self.queries.shape()[0] != self.anchors.len() {
            return Err(HatError::Config(format!(
                "{} anchors but queries of shape {:?}",
                self.anchors.len(),
                self.queries.shape()
            )));
        }
        for a in &self.anchors {
            a.validate()?;
        }
        Ok(())
    }
}

/// `K×M` anchor proposals and `[K, M, 2C]` feature proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub anchors: Vec<Vec<Anchor>>,
    pub features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    /// `W_c`, `[K, 2C, 2C]`
    pub channel: Tensor,
    /// `W_f`, `[K, M]`
    pub feature: Tensor,
    /// `W_a`, `[K, M]`; absent until decoded
    pub anchor: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub anchors: Vec<Anchor>,
    /// `[K, C]`
    pub features: Tensor,
    /// Convex combination of the hypotheses, before yaw renormalisation
    /// and refinement.
    pub anchors_pre_refine: Vec<Anchor>,
    pub hypotheses: Vec<Vec<Anchor>>,
    /// `W_a`, `[K, M]`
    pub anchor_weights: Tensor,
}

fn rows_to_anchors(t: &Tensor) -> Vec<Anchor> {
    t.data().chunks(ANCHOR_DIM).map(|r| Anchor::from_slice(r).expect("10-dim rows")).collect()
}

fn hyps_to_anchors(t: &Tensor, m: usize) -> Vec<Vec<Anchor>> {
    rows_to_anchors(t).chunks(m).map(|c| c.to_vec()).collect()
}

fn check_queries(bank: &InstanceBank, params: &HatParameters) -> Result<()> {
    bank.validate()?;
    if bank.queries.shape()[1] != params.config.channels {
        return Err(HatError::Config(format!(
            "query width {} but C = {}",
            bank.queries.shape()[1],
            params.config.channels
        )));
    }
    Ok(())
}

/// Entry `(i, m)` is model `m` applied to anchor `i`, then warped into the
/// target frame.
pub fn generate_anchor_hypotheses(
    bank: &InstanceBank,
    dt: f64,
    ego: &EgoTransform,
    params: &HatParameters,
) -> Result<Vec<Vec<Anchor>>> {
    check_queries(bank, params)?;
    let aug = build_augmented(ego)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let q = g.constant(bank.queries.clone());
    let lat = p.latents(&mut g, q)?;
    let h = p.hypotheses(&mut g, &bank.anchors, lat, dt, &[aug])?;
    Ok(hyps_to_anchors(g.value(h), params.config.models.len()))
}

/// `[n, C]` state-decoupled embeddings.
pub fn encode_motion_embedding(anchors: &[Anchor], params: &HatParameters) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let a = g.constant(anchors_tensor(anchors));
    let e = p.embed(&mut g, a)?;
    Ok(g.value(e).clone())
}

/// `[K, M, C]` embeddings with `[K, C]` queries broadcast across `M`.
pub fn build_feature_hypotheses(embeds: &Tensor, queries: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.constant(embeds.clone());
    let q = g.constant(queries.clone());
    let h = build_feature_hypotheses_var(&mut g, e, q)?;
    Ok(g.value(h).clone())
}

/// `W_c` and `W_f` from the ego-warped historical anchors and queries.
pub fn compute_dynamic_weights(bank: &InstanceBank, ego: &EgoTransform, params: &HatParameters) -> Result<DecoderWeights> {
    check_queries(bank, params)?;
    let aug = build_augmented(ego)?;
    let warped: Vec<Anchor> = bank.anchors.iter().map(|a| Anchor::from_array(&aug.apply_array(&a.to_array()))).collect();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let w = g.constant(anchors_tensor(&warped));
    let q = g.constant(bank.queries.clone());
    let (wc, wf) = p.dynamic_weights(&mut g, w, q)?;
    let k = bank.len();
    Ok(DecoderWeights {
        channel: g.value(wc).clone(),
        feature: g.value(wf).reshape(&[k, params.config.models.len()])?,
        anchor: None,
    })
}

/// `[K, M, 2C]` feature hypotheses → `[K, 2C]`.
pub fn fuse_features(hyps: &Tensor, w: &DecoderWeights, params: &HatParameters) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let k = hyps.shape()[0];
    let h = g.constant(hyps.clone());
    let wc = g.constant(w.channel.clone());
    let wf = g.constant(w.feature.reshape(&[k, 1, w.feature.len() / k.max(1)])?);
    let out = p.fuse(&mut g, h, wc, wf)?;
    Ok(g.value(out).clone())
}

/// `W_a = softmax(L_a(W_f))` along the hypothesis axis.
pub fn decode_anchor_weights(w_f: &Tensor, params: &HatParameters) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let k = w_f.shape()[0];
    let wf = g.constant(w_f.reshape(&[k, 1, w_f.len() / k.max(1)])?);
    let wa = p.anchor_weights(&mut g, wf)?;
    Ok(g.value(wa).clone())
}

/// Convex combination of each instance's hypotheses.
/// Returns `(combined, yaw-normalised)`.
pub fn decode_anchor(hyps: &[Vec<Anchor>], w_a: &Tensor) -> Result<(Vec<Anchor>, Vec<Anchor>)> {
    let m = hyps.first().map_or(0, |h| h.len());
    if hyps.iter().any(|h| h.len() != m) {
        return Err(HatError::Config("ragged hypothesis set".into()));
    }
    let flat: Vec<Anchor> = hyps.iter().flatten().copied().collect();
    let mut g = Graph::new();
    let h = g.constant(anchors_tensor(&flat).reshape(&[hyps.len(), m, ANCHOR_DIM])?);
    let wa = g.constant(w_a.clone());
    let (raw, norm) = decode_var(&mut g, h, wa)?;
    Ok((rows_to_anchors(g.value(raw)), rows_to_anchors(g.value(norm))))
}

/// Final features `[K, C]` and refined anchors.
pub fn mix_feature_anchor(fused: &Tensor, decoded: &[Anchor], params: &HatParameters) -> Result<(Tensor, Vec<Anchor>)> {
    let c = params.config.channels;
    if params.ffn.output_dim() != c {
        return Err(HatError::Config(format!("FFN outputs {} channels, expected {c}", params.ffn.output_dim())));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let q = g.constant(fused.clone());
    let b = g.constant(anchors_tensor(decoded));
    let (f, a) = p.mix(&mut g, q, b)?;
    Ok((g.value(f).clone(), rows_to_anchors(g.value(a))))
}

/// Propagates every instance of `bank` by `dt` into the frame reached by `ego`.
pub fn align(bank: &InstanceBank, dt: f64, ego: &EgoTransform, params: &HatParameters) -> Result<AlignmentResult> {
    check_queries(bank, params)?;
    if params.ffn.output_dim() != params.config.channels {
        return Err(HatError::Config("FFN output width differs from C".into()));
    }
    let aug = build_augmented(ego)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let q = g.constant(bank.queries.clone());
    let v = p.forward(&mut g, &bank.anchors, q, dt, &[aug])?;
    Ok(AlignmentResult {
        anchors: rows_to_anchors(g.value(v.anchors)),
        features: g.value(v.features).clone(),
        anchors_pre_refine: rows_to_anchors(g.value(v.combined)),
        hypotheses: hyps_to_anchors(g.value(v.hypotheses), params.config.models.len()),
        anchor_weights: g.value(v.anchor_weights).clone(),
    })
}
