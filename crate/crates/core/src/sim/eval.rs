//! Comparative evaluation of aligners on observed scenes. Every method's
//! propagated anchor and the ground truth are expressed in frame `t` before
//! differencing.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::observe::{NoiseConfig, ObservedScene};
use super::scene::Scene;
use super::train::{HatModel, ImplicitModel};
use super::SimError;
use crate::baselines::{
    imm_predict, imm_step, implicit_sta, single_model_sta, ImmState, MeasurementNoise, ProcessNoise,
    DEFAULT_SELF_TRANSITION,
};
use crate::geometry::{build_augmented, invert, warp_anchor, Anchor};
use crate::hat::{align, InstanceBank};
use crate::motion::MotionModelKind;
use crate::tensor::Tensor;

/// IMM settings; measurement noise follows the observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub process: ProcessNoise,
    pub self_transition: f64,
    /// Initial std of [x, y, θ, v, ω, a].
    pub initial_std: [f64; 6],
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            process: ProcessNoise::default(),
            self_transition: DEFAULT_SELF_TRANSITION,
            initial_std: [0.5, 0.5, 0.1, 1.0, 0.05, 0.1],
        }
    }
}

impl FilterConfig {
    pub fn measurement(noise: &NoiseConfig) -> MeasurementNoise {
        // a zero std would make S singular on exact data; keep a floor
        let f = |s: f64| s.max(1e-3);
        MeasurementNoise::new(f(noise.position), f(noise.yaw), f(noise.velocity))
    }
}

/// Methods to evaluate. Learned methods are skipped when absent.
#[derive(Debug, Clone, Default)]
pub struct MethodSet<'a> {
    pub hat: Option<&'a HatModel>,
    /// HAT restricted to a single motion model.
    pub hat_single: Option<&'a HatModel>,
    pub single: Vec<MotionModelKind>,
    pub implicit: Option<&'a ImplicitModel>,
    pub imm: Option<(FilterConfig, NoiseConfig)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Hat,
    HatSingle,
    Single(MotionModelKind),
    Implicit,
    Imm,
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::Hat => "hat".into(),
            Method::HatSingle => "hat-m1".into(),
            Method::Single(k) => format!("single-{}", k.name()),
            Method::Implicit => "implicit".into(),
            Method::Imm => "imm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean_translation: f64,
    pub median_translation: f64,
    pub mean_yaw: f64,
    pub median_yaw: f64,
    pub mean_velocity: f64,
    pub median_velocity: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl ErrorStats {
    fn from_errors(e: &[[f64; 3]]) -> Self {
        let col = |i: usize| e.iter().map(|r| r[i]).collect::<Vec<_>>();
        let (t, y, v) = (col(0), col(1), col(2));
        Self {
            count: e.len(),
            mean_translation: mean(&t),
            median_translation: median(&t),
            mean_yaw: mean(&y),
            median_yaw: median(&y),
            mean_velocity: mean(&v),
            median_velocity: median(&v),
        }
    }
}

/// Planar centre distance, yaw-vector distance, velocity distance.
pub fn anchor_errors(pred: &Anchor, gt: &Anchor) -> [f64; 3] {
    [
        (pred.position[0] - gt.position[0]).hypot(pred.position[1] - gt.position[1]),
        (pred.yaw[0] - gt.yaw[0]).hypot(pred.yaw[1] - gt.yaw[1]),
        (pred.velocity[0] - gt.velocity[0]).hypot(pred.velocity[1] - gt.velocity[1]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    /// `all` or a motion model name
    pub regime: String,
    #[serde(flatten)]
    pub stats: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub regime: MotionModelKind,
    pub count: usize,
    /// Mean `W_a` per model, in library order.
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub models: Vec<MotionModelKind>,
    pub rows: Vec<WeightRow>,
}

impl WeightReport {
    /// Mean mass on `kinds` in frames labelled with a regime accepted by `regime`.
    pub fn mass(&self, kinds: &[MotionModelKind], regime: impl Fn(MotionModelKind) -> bool) -> f64 {
        let cols: Vec<usize> = (0..self.models.len()).filter(|&j| kinds.contains(&self.models[j])).collect();
        let (mut total, mut n) = (0.0, 0usize);
        for r in self.rows.iter().filter(|r| regime(r.regime)) {
            total += cols.iter().map(|&j| r.mean[j]).sum::<f64>() * r.count as f64;
            n += r.count;
        }
        if n == 0 {
            f64::NAN
        } else {
            total / n as f64
        }
    }

    /// Turning-model mass in turning frames minus that in linear frames.
    pub fn turning_contrast(&self) -> f64 {
        let tm = [MotionModelKind::Ctrv, MotionModelKind::Ctra];
        self.mass(&tm, MotionModelKind::is_turning) - self.mass(&tm, MotionModelKind::is_linear)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("regime,count");
        for m in &self.models {
            write!(s, ",{}", m.name()).expect("string write");
        }
        s.push('\n');
        for r in &self.rows {
            write!(s, "{},{}", r.regime.name(), r.count).expect("string write");
            for w in &r.mean {
                write!(s, ",{w:.9}").expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub calls: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub instances_per_call: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodRow>,
    pub weights: Option<WeightReport>,
    /// Wall-clock timing of the HAT align calls; not deterministic, so it
    /// is excluded from the serialized report.
    #[serde(skip)]
    pub latency: Option<LatencyReport>,
}

pub const CSV_HEADER: &str = "method,regime,count,mean_translation_m,median_translation_m,mean_yaw,median_yaw,mean_velocity_mps,median_velocity_mps";

impl EvalReport {
    pub fn row(&self, method: Method, regime: Option<MotionModelKind>) -> Option<&ErrorStats> {
        let (m, r) = (method.name(), regime.map_or("all", |k| k.name()));
        self.rows.iter().find(|x| x.method == m && x.regime == r).map(|x| &x.stats)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let t = &r.stats;
            writeln!(
                s,
                "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                r.method,
                r.regime,
                t.count,
                t.mean_translation,
                t.median_translation,
                t.mean_yaw,
                t.median_yaw,
                t.mean_velocity,
                t.median_velocity
            )
            .expect("string write");
        }
        s
    }
}

/// Per-sample errors plus the regime of each sample.
struct Collected {
    errors: Vec<[f64; 3]>,
    regimes: Vec<MotionModelKind>,
}

impl Collected {
    fn new() -> Self {
        Self { errors: Vec::new(), regimes: Vec::new() }
    }

    fn rows(&self, method: Method) -> Vec<MethodRow> {
        let name = method.name();
        let mut rows = vec![MethodRow { method: name.clone(), regime: "all".into(), stats: ErrorStats::from_errors(&self.errors) }];
        for k in MotionModelKind::ALL {
            let e: Vec<[f64; 3]> =
                self.errors.iter().zip(&self.regimes).filter(|(_, r)| **r == k).map(|(e, _)| *e).collect();
            if !e.is_empty() {
                rows.push(MethodRow { method: name.clone(), regime: k.name().into(), stats: ErrorStats::from_errors(&e) });
            }
        }
        rows
    }
}

fn check_inputs(scenes: &[Scene], observed: &[ObservedScene]) -> Result<(), SimError> {
    if scenes.is_empty() {
        return Err(SimError::Contract("evaluation needs at least one scene".into()));
    }
    if scenes.len() != observed.len() {
        return Err(SimError::Contract(format!("{} scenes but {} observation sets", scenes.len(), observed.len())));
    }
    Ok(())
}

/// Runs a per-frame bank aligner over every (scene, t ≥ 1).
fn run_banks<F>(scenes: &[Scene], mut f: F) -> Result<Collected, SimError>
where
    F: FnMut(usize, usize, &crate::geometry::EgoTransform) -> Result<Vec<Anchor>, SimError>,
{
    let mut c = Collected::new();
    for (s, scene) in scenes.iter().enumerate() {
        for t in 1..scene.frames() {
            let out = f(s, t, &scene.frame_transform(t - 1, t))?;
            for (i, pred) in out.iter().enumerate() {
                c.errors.push(anchor_errors(pred, &scene.gt_in_frame(i, t)));
                c.regimes.push(scene.tracks[i].regimes[t]);
            }
        }
    }
    Ok(c)
}

struct HatRun {
    collected: Collected,
    weights: WeightReport,
    latency: LatencyReport,
}

fn run_hat(scenes: &[Scene], observed: &[ObservedScene], model: &HatModel) -> Result<HatRun, SimError> {
    let models = model.hat.config.models.clone();
    let m = models.len();
    let mut sums = vec![(0usize, vec![0.0; m]); MotionModelKind::ALL.len()];
    let mut times = Vec::new();
    let mut per_call = 0;
    let collected = run_banks(scenes, |s, t, ego| {
        let scene = &scenes[s];
        let bank = observed[s].bank(t - 1, &model.encoder)?;
        per_call = bank.len();
        let start = Instant::now();
        let r = align(&bank, scene.dt, ego, &model.hat)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        for (i, w) in r.anchor_weights.data().chunks(m).enumerate() {
            let k = scene.tracks[i].regimes[t];
            let slot = &mut sums[MotionModelKind::ALL.iter().position(|x| *x == k).expect("known kind")];
            slot.0 += 1;
            for (acc, v) in slot.1.iter_mut().zip(w) {
                *acc += v;
            }
        }
        Ok(r.anchors)
    })?;
    let rows = MotionModelKind::ALL
        .iter()
        .zip(sums)
        .filter(|(_, (n, _))| *n > 0)
        .map(|(&regime, (n, s))| WeightRow { regime, count: n, mean: s.iter().map(|v| v / n as f64).collect() })
        .collect();
    let latency = LatencyReport { calls: times.len(), median_ms: median(&times), mean_ms: mean(&times), instances_per_call: per_call };
    Ok(HatRun { collected, weights: WeightReport { models, rows }, latency })
}

fn run_imm(scenes: &[Scene], observed: &[ObservedScene], filter: &FilterConfig, noise: &NoiseConfig) -> Result<Collected, SimError> {
    let measurement = FilterConfig::measurement(noise);
    let mut c = Collected::new();
    for (scene, obs) in scenes.iter().zip(observed) {
        let to_world: Vec<_> = scene.poses.iter().map(build_augmented).collect::<Result<_, _>>()?;
        let to_ego: Vec<_> = scene.poses.iter().map(|p| build_augmented(&invert(p))).collect::<Result<_, _>>()?;
        for i in 0..scene.tracks.len() {
            let world = |k: usize| warp_anchor(&obs.anchors[k][i], &to_world[k]);
            let mut state = ImmState::from_anchor(&MotionModelKind::ALL, &world(0), filter.initial_std, filter.self_transition)?;
            for t in 1..scene.frames() {
                if t > 1 {
                    state = imm_step(&state, scene.dt, &world(t - 1), &filter.process, &measurement)?.0;
                }
                let pred = imm_predict(&state, scene.dt, &filter.process)?.to_anchor(&world(t - 1));
                let pred = warp_anchor(&pred, &to_ego[t]);
                c.errors.push(anchor_errors(&pred, &scene.gt_in_frame(i, t)));
                c.regimes.push(scene.tracks[i].regimes[t]);
            }
        }
    }
    Ok(c)
}

/// Latency and weights of the full HAT model are attached when it is
/// among the methods.
pub fn evaluate(scenes: &[Scene], observed: &[ObservedScene], methods: &MethodSet) -> Result<EvalReport, SimError> {
    check_inputs(scenes, observed)?;
    let mut rows = Vec::new();
    let (mut weights, mut latency) = (None, None);
    if let Some(model) = methods.hat {
        let run = run_hat(scenes, observed, model)?;
        rows.extend(run.collected.rows(Method::Hat));
        weights = Some(run.weights);
        latency = Some(run.latency);
    }
    if let Some(model) = methods.hat_single {
        rows.extend(run_hat(scenes, observed, model)?.collected.rows(Method::HatSingle));
    }
    for &kind in &methods.single {
        let c = run_banks(scenes, |s, t, ego| {
            let anchors = observed[s].anchors[t - 1].clone();
            let bank = InstanceBank::new(anchors.clone(), Tensor::zeros(&[anchors.len(), 1]))?;
            Ok(single_model_sta(kind, &bank, scenes[s].dt, ego)?)
        })?;
        rows.extend(c.rows(Method::Single(kind)));
    }
    if let Some(model) = methods.implicit {
        let c = run_banks(scenes, |s, t, ego| {
            let bank = observed[s].bank(t - 1, &model.encoder)?;
            Ok(implicit_sta(&bank, scenes[s].dt, ego, &model.implicit)?)
        })?;
        rows.extend(c.rows(Method::Implicit));
    }
    if let Some((filter, noise)) = &methods.imm {
        rows.extend(run_imm(scenes, observed, filter, noise)?.rows(Method::Imm));
    }
    Ok(EvalReport { rows, weights, latency })
}

/// Mean `W_a` per regime label.
pub fn weight_report(scenes: &[Scene], observed: &[ObservedScene], model: &HatModel) -> Result<WeightReport, SimError> {
    check_inputs(scenes, observed)?;
    Ok(run_hat(scenes, observed, model)?.weights)
}
