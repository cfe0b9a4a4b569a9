//! Noisy per-frame observations and the learnable window encoder that turns
//! the last few observations of a track into its query.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::{stream_rng, Scene};
use super::SimError;
use crate::geometry::{build_augmented, invert, warp_anchor, Anchor};
use crate::hat::InstanceBank;
use crate::tensor::{BoundMlp, Graph, Mlp, Tensor, Var};

/// Frames per query window.
pub const WINDOW: usize = 3;
/// Features per window frame: relative x/y, yaw vector, velocity, then the
/// sines of the heading and velocity-direction offsets from frame `k`.
pub const WINDOW_FRAME_DIM: usize = 8;
pub const WINDOW_DIM: usize = WINDOW * WINDOW_FRAME_DIM;

const REL_POSITION_SCALE: f64 = 0.2;
const VELOCITY_SCALE: f64 = 0.1;
const MIN_SPEED_PRODUCT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// m, per position axis
    pub position: f64,
    /// added to each yaw-vector component before renormalising
    pub yaw: f64,
    /// m/s, per velocity axis
    pub velocity: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { position: 0.3, yaw: 0.05, velocity: 0.2 }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self { position: 0.0, yaw: 0.0, velocity: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [("position", self.position), ("yaw", self.yaw), ("velocity", self.velocity)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::Config(format!("noise.{name} must be a finite non-negative std, got {v}")));
            }
        }
        Ok(())
    }
}

/// Observations of one scene: `anchors[k][i]` is track `i` seen in ego
/// frame `k`, `windows[k]` the `[K, WINDOW_DIM]` window features at `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedScene {
    pub anchors: Vec<Vec<Anchor>>,
    pub windows: Vec<Tensor>,
}

impl ObservedScene {
    /// Bank at frame `k` with queries from `encoder`.
    pub fn bank(&self, k: usize, encoder: &WindowEncoder) -> Result<InstanceBank, SimError> {
        let q = encoder.queries(&self.windows[k])?;
        Ok(InstanceBank::new(self.anchors[k].clone(), q)?)
    }
}

fn perturb(gt: &Anchor, noise: &NoiseConfig, rng: &mut impl Rng) -> Anchor {
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    let mut a = *gt;
    for p in &mut a.position {
        *p += noise.position * n();
    }
    if noise.yaw > 0.0 {
        let c = a.yaw[0] + noise.yaw * n();
        let s = a.yaw[1] + noise.yaw * n();
        let r = c.hypot(s);
        a.yaw = if r > 0.0 { [c / r, s / r] } else { gt.yaw };
    }
    for v in &mut a.velocity {
        *v += noise.velocity * n();
    }
    a
}

/// Window features of every track at frame `k`. The observations at
/// `k−2..=k` are warped into frame `k`; frames before 0 repeat frame 0.
pub fn window_features(scene: &Scene, anchors: &[Vec<Anchor>], k: usize) -> Result<Tensor, SimError> {
    let tracks = anchors[k].len();
    let mut data = Vec::with_capacity(tracks * WINDOW_DIM);
    let augs = (0..WINDOW)
        .map(|w| {
            let j = (k + w + 1).saturating_sub(WINDOW);
            Ok((j, build_augmented(&scene.frame_transform(j, k))?))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    for i in 0..tracks {
        let cur = anchors[k][i];
        for (j, aug) in &augs {
            let a = warp_anchor(&anchors[*j][i], aug);
            // turning shows up linearly in these two
            let yaw_offset = cur.yaw[0] * a.yaw[1] - cur.yaw[1] * a.yaw[0];
            let speeds = cur.velocity[0].hypot(cur.velocity[1]) * a.velocity[0].hypot(a.velocity[1]);
            let course_offset = if speeds > MIN_SPEED_PRODUCT {
                (cur.velocity[0] * a.velocity[1] - cur.velocity[1] * a.velocity[0]) / speeds
            } else {
                0.0
            };
            data.extend_from_slice(&[
                REL_POSITION_SCALE * (a.position[0] - cur.position[0]),
                REL_POSITION_SCALE * (a.position[1] - cur.position[1]),
                a.yaw[0],
                a.yaw[1],
                VELOCITY_SCALE * a.velocity[0],
                VELOCITY_SCALE * a.velocity[1],
                yaw_offset,
                course_offset,
            ]);
        }
    }
    Ok(Tensor::new(&[tracks, WINDOW_DIM], data)?)
}

/// Perturbs every ground-truth anchor (expressed in its frame's ego
/// coordinates) and builds the window features. Track `i` draws from
/// stream `i + 1` of `seed`.
pub fn observe(scene: &Scene, noise: &NoiseConfig, seed: u64) -> Result<ObservedScene, SimError> {
    noise.validate()?;
    let frames = scene.frames();
    let mut anchors = vec![Vec::with_capacity(scene.tracks.len()); frames];
    let inv: Vec<_> = scene.poses.iter().map(|p| build_augmented(&invert(p))).collect::<Result<_, _>>()?;
    for (i, track) in scene.tracks.iter().enumerate() {
        let mut rng = stream_rng(seed, i as u64 + 1);
        for k in 0..frames {
            anchors[k].push(perturb(&warp_anchor(&track.gt[k], &inv[k]), noise, &mut rng));
        }
    }
    let windows = (0..frames).map(|k| window_features(scene, &anchors, k)).collect::<Result<_, _>>()?;
    Ok(ObservedScene { anchors, windows })
}

/// Two-layer MLP from window features to a `C`-wide query.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEncoder {
    pub mlp: Mlp,
}

impl WindowEncoder {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::init(WINDOW_DIM, channels, channels, rng) }
    }

    pub fn zeros(channels: usize) -> Self {
        Self { mlp: Mlp::zeros(WINDOW_DIM, channels, channels) }
    }

    pub fn channels(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn tensor_names() -> Vec<String> {
        ["first.weight", "first.bias", "second.weight", "second.bias"].map(|s| format!("window.{s}")).to_vec()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.mlp.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.tensors_mut()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundWindowEncoder {
        BoundWindowEncoder { mlp: self.mlp.bind(g, trainable) }
    }

    /// `[K, WINDOW_DIM]` → `[K, C]`.
    pub fn queries(&self, windows: &Tensor) -> Result<Tensor, SimError> {
        let mut g = Graph::new();
        let e = self.bind(&mut g, false);
        let x = g.constant(windows.clone());
        let q = e.forward(&mut g, x)?;
        Ok(g.value(q).clone())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundWindowEncoder {
    pub mlp: BoundMlp,
}

impl BoundWindowEncoder {
    pub fn forward(&self, g: &mut Graph, windows: Var) -> Result<Var, SimError> {
        Ok(self.mlp.forward(g, windows)?)
    }
}
