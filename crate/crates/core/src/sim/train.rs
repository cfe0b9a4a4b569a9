//! Supervised alignment training: the aligned anchor of every observation
//! at `t−1` is pulled towards the ground truth at `t` with a smooth-L1 loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::observe::{ObservedScene, WindowEncoder, WINDOW_DIM};
use super::scene::{stream_rng, Scene};
use super::SimError;
use crate::baselines::ImplicitParams;
use crate::geometry::{build_augmented, Anchor, AugmentedTransform, ANCHOR_DIM};
use crate::hat::{HatConfig, HatParameters};
use crate::motion::MotionModelKind;
use crate::tensor::{adam_step, Graph, OptimizerState, Tensor, Var, ADAM_LR};

/// Transition region of the smooth-L1 loss.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 12, batch_size: 64, learning_rate: ADAM_LR, seed: 0 }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SimError::Config(format!(
                "batch_size must be ≥ 1 and learning_rate positive, got {} / {}",
                self.batch_size, self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One training pair per (track, frame ≥ 1): the observation at `t−1` in
/// frame `t−1` and the ground truth at `t` in frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub dt: f64,
    pub anchors: Vec<Anchor>,
    pub windows: Vec<[f64; WINDOW_DIM]>,
    pub augs: Vec<AugmentedTransform>,
    pub targets: Vec<Anchor>,
    pub regimes: Vec<MotionModelKind>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        let mut windows = Vec::with_capacity(idx.len() * WINDOW_DIM);
        let mut targets = Vec::with_capacity(idx.len() * ANCHOR_DIM);
        for &i in idx {
            windows.extend_from_slice(&self.windows[i]);
            targets.extend_from_slice(&self.targets[i].to_array());
        }
        Batch {
            anchors: idx.iter().map(|&i| self.anchors[i]).collect(),
            windows: Tensor::new(&[idx.len(), WINDOW_DIM], windows).expect("window rows"),
            augs: idx.iter().map(|&i| self.augs[i]).collect(),
            targets: Tensor::new(&[idx.len(), ANCHOR_DIM], targets).expect("anchor rows"),
        }
    }
}

pub fn build_samples(scenes: &[Scene], observed: &[ObservedScene]) -> Result<SampleSet, SimError> {
    if scenes.is_empty() || scenes.len() != observed.len() {
        return Err(SimError::Contract(format!("{} scenes but {} observation sets", scenes.len(), observed.len())));
    }
    let dt = scenes[0].dt;
    let mut set = SampleSet {
        dt,
        anchors: Vec::new(),
        windows: Vec::new(),
        augs: Vec::new(),
        targets: Vec::new(),
        regimes: Vec::new(),
    };
    for (scene, obs) in scenes.iter().zip(observed) {
        if scene.dt != dt {
            return Err(SimError::Contract("scenes with different dt cannot share a sample set".into()));
        }
        for t in 1..scene.frames() {
            let aug = build_augmented(&scene.frame_transform(t - 1, t))?;
            let w = obs.windows[t - 1].data();
            for i in 0..scene.tracks.len() {
                set.anchors.push(obs.anchors[t - 1][i]);
                set.windows.push(w[i * WINDOW_DIM..(i + 1) * WINDOW_DIM].try_into().expect("window width"));
                set.augs.push(aug);
                set.targets.push(scene.gt_in_frame(i, t));
                set.regimes.push(scene.tracks[i].regimes[t]);
            }
        }
    }
    Ok(set)
}

pub struct Batch {
    pub anchors: Vec<Anchor>,
    pub windows: Tensor,
    pub augs: Vec<AugmentedTransform>,
    pub targets: Tensor,
}

/// A learnable aligner. `forward` binds every tensor as a trainable
/// parameter, in `tensors()` order, and returns the aligned `[B, 10]` rows.
pub trait Aligner {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    fn forward(&self, g: &mut Graph, batch: &Batch, dt: f64) -> Result<Var, SimError>;
}

/// Window encoder plus the hypothesis aligner.
#[derive(Debug, Clone, PartialEq)]
pub struct HatModel {
    pub encoder: WindowEncoder,
    pub hat: HatParameters,
}

impl HatModel {
    pub fn init(config: HatConfig, rng: &mut impl Rng) -> Result<Self, SimError> {
        let encoder = WindowEncoder::init(config.channels, rng);
        let hat = HatParameters::init(config, rng)?;
        Ok(Self { encoder, hat })
    }
}

impl Aligner for HatModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.hat.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.hat.tensors_mut());
        t
    }

    fn forward(&self, g: &mut Graph, batch: &Batch, dt: f64) -> Result<Var, SimError> {
        let enc = self.encoder.bind(g, true);
        let hat = self.hat.bind(g, true);
        let w = g.constant(batch.windows.clone());
        let q = enc.forward(g, w)?;
        Ok(hat.forward(g, &batch.anchors, q, dt, &batch.augs)?.anchors)
    }
}

/// Window encoder plus the query-only residual aligner.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitModel {
    pub encoder: WindowEncoder,
    pub implicit: ImplicitParams,
}

impl ImplicitModel {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let encoder = WindowEncoder::init(channels, rng);
        let implicit = ImplicitParams::init(channels, rng);
        Self { encoder, implicit }
    }
}

impl Aligner for ImplicitModel {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.implicit.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.implicit.tensors_mut());
        t
    }

    fn forward(&self, g: &mut Graph, batch: &Batch, _dt: f64) -> Result<Var, SimError> {
        let enc = self.encoder.bind(g, true);
        let imp = self.implicit.bind(g, true);
        let w = g.constant(batch.windows.clone());
        let q = enc.forward(g, w)?;
        let warped: Vec<f64> =
            batch.anchors.iter().zip(&batch.augs).flat_map(|(a, aug)| aug.apply_array(&a.to_array())).collect();
        let warped = g.constant(Tensor::new(&[batch.anchors.len(), ANCHOR_DIM], warped)?);
        Ok(imp.forward(g, warped, q)?)
    }
}

/// Column weights turning the elementwise smooth-L1 of `[B, 10]` residuals
/// into mean(position) + mean(yaw vector) + mean(velocity); size is not
/// supervised.
fn loss_weights(rows: usize) -> Vec<f64> {
    let b = rows as f64;
    let mut w = [0.0; ANCHOR_DIM];
    w[..3].fill(1.0 / (3.0 * b));
    w[6..8].fill(1.0 / (2.0 * b));
    w[8..].fill(1.0 / (2.0 * b));
    (0..rows).flat_map(|_| w).collect()
}

pub fn alignment_loss(g: &mut Graph, predicted: Var, targets: &Tensor) -> Result<Var, SimError> {
    let t = g.constant(targets.clone());
    let d = g.sub(predicted, t)?;
    let l = g.smooth_l1(d, SMOOTH_L1_BETA);
    Ok(g.weighted_sum(l, loss_weights(targets.rows()))?)
}

fn chunks(len: usize, batch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..len).step_by(batch).map(move |s| s..(s + batch).min(len))
}

/// Mean loss of `model` over `set` without updating it.
pub fn dataset_loss(model: &impl Aligner, set: &SampleSet, batch_size: usize) -> Result<f64, SimError> {
    let order: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for r in chunks(set.len(), batch_size.max(1)) {
        let b = set.batch(&order[r.clone()]);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &b, set.dt)?;
        let l = alignment_loss(&mut g, out, &b.targets)?;
        total += g.value(l).data()[0] * r.len() as f64;
    }
    Ok(total / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    /// Whether the mean of the last third of the curve is below the mean of
    /// the first third.
    pub fn trending_down(&self) -> bool {
        let n = self.loss_curve.len();
        if n < 3 {
            return n < 2 || self.loss_curve[n - 1] <= self.loss_curve[0];
        }
        let k = n / 3;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.loss_curve[n - k..]) < mean(&self.loss_curve[..k])
    }
}

/// Adam over shuffled mini-batches; shuffling draws from stream 1 of
/// `opts.seed`.
pub fn train<M: Aligner>(model: &mut M, set: &SampleSet, opts: &TrainOptions) -> Result<TrainReport, SimError> {
    opts.validate()?;
    if set.is_empty() {
        return Err(SimError::Contract("no training samples".into()));
    }
    let mut rng = stream_rng(opts.seed, 1);
    let mut state = OptimizerState::new(model.tensors(), opts.learning_rate);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for r in chunks(set.len(), opts.batch_size) {
            let b = set.batch(&order[r.clone()]);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &b, set.dt)?;
            let l = alignment_loss(&mut g, out, &b.targets)?;
            let loss = g.value(l).data()[0];
            if !loss.is_finite() {
                return Err(SimError::Diverged { epoch, loss });
            }
            g.backward(l)?;
            let grads = g.param_grads();
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(SimError::Diverged { epoch, loss: f64::NAN });
            }
            adam_step(model.tensors_mut(), &grads, &mut state)?;
            total += loss * r.len() as f64;
        }
        curve.push(total / set.len() as f64);
    }
    Ok(TrainReport { loss_curve: curve })
}

/// Trains `model` on the observed scenes.
pub fn train_hat(
    scenes: &[Scene],
    observed: &[ObservedScene],
    mut model: HatModel,
    opts: &TrainOptions,
) -> Result<(HatModel, TrainReport), SimError> {
    let set = build_samples(scenes, observed)?;
    let report = train(&mut model, &set, opts)?;
    Ok((model, report))
}
