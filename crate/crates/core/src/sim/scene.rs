//! Synthetic multi-regime scenes. Ground truth lives in the world frame and
//! steps exactly by the motion-model transitions; the ego vehicle drives a
//! constant-turn path whose poses map each ego frame into the world.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::geometry::{build_augmented, compose, invert, warp_anchor, Anchor, EgoTransform};
use crate::motion::{predict, LatentKinematics, MotionModelKind};

/// Relative frequency of each regime. STATIC tracks stay parked for their
/// whole life; the other weights drive the segment draws of moving tracks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeMix {
    pub cv: f64,
    #[serde(rename = "static")]
    pub stationary: f64,
    pub ca: f64,
    pub ctrv: f64,
    pub ctra: f64,
}

impl Default for RegimeMix {
    fn default() -> Self {
        Self { cv: 0.3, stationary: 0.2, ca: 0.2, ctrv: 0.15, ctra: 0.15 }
    }
}

impl RegimeMix {
    pub fn weight(&self, kind: MotionModelKind) -> f64 {
        match kind {
            MotionModelKind::Cv => self.cv,
            MotionModelKind::Static => self.stationary,
            MotionModelKind::Ca => self.ca,
            MotionModelKind::Ctrv => self.ctrv,
            MotionModelKind::Ctra => self.ctra,
        }
    }

    pub fn only(kind: MotionModelKind) -> Self {
        let mut m = Self { cv: 0.0, stationary: 0.0, ca: 0.0, ctrv: 0.0, ctra: 0.0 };
        match kind {
            MotionModelKind::Cv => m.cv = 1.0,
            MotionModelKind::Static => m.stationary = 1.0,
            MotionModelKind::Ca => m.ca = 1.0,
            MotionModelKind::Ctrv => m.ctrv = 1.0,
            MotionModelKind::Ctra => m.ctra = 1.0,
        }
        m
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let w = MotionModelKind::ALL.map(|k| self.weight(k));
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(SimError::Config(format!("regime mix weights must be finite, non-negative and not all zero: {w:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EgoConfig {
    /// m/s, drawn uniformly per scene
    pub speed: [f64; 2],
    /// rad/s, magnitude drawn uniformly per scene
    pub yaw_rate: [f64; 2],
}

impl Default for EgoConfig {
    fn default() -> Self {
        Self { speed: [0.0, 10.0], yaw_rate: [0.0, 0.05] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub tracks: usize,
    pub frames: usize,
    pub dt: f64,
    pub mix: RegimeMix,
    /// inclusive bounds on segment length in frames
    pub segment_frames: [usize; 2],
    pub speed: [f64; 2],
    pub turn_rate: [f64; 2],
    pub accel: [f64; 2],
    /// initial object positions are uniform in a disc of this radius (m)
    pub spawn_radius: f64,
    pub ego: EgoConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            tracks: 20,
            frames: 40,
            dt: 0.5,
            mix: RegimeMix::default(),
            segment_frames: [8, 20],
            speed: [5.0, 20.0],
            turn_rate: [0.06, 0.1],
            accel: [0.03, 0.1],
            spawn_radius: 40.0,
            ego: EgoConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.mix.validate()?;
        let bad = |m: String| Err(SimError::Config(m));
        if self.tracks == 0 || self.frames < 2 {
            return bad(format!("need at least one track and two frames, got {} / {}", self.tracks, self.frames));
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.segment_frames[0] == 0 || self.segment_frames[0] > self.segment_frames[1] {
            return bad(format!("bad segment length range {:?}", self.segment_frames));
        }
        let range = |name: &str, r: [f64; 2], lo: f64, hi: f64| -> Result<(), SimError> {
            if !(r[0] >= lo && r[0] <= r[1] && r[1] <= hi) {
                return Err(SimError::Config(format!("{name} range {r:?} must lie within [{lo}, {hi}]")));
            }
            Ok(())
        };
        range("speed", self.speed, 0.0, 20.0)?;
        range("turn_rate", self.turn_rate, 0.0, 0.1)?;
        range("accel", self.accel, 0.0, 0.1)?;
        range("ego.speed", self.ego.speed, 0.0, 40.0)?;
        range("ego.yaw_rate", self.ego.yaw_rate, 0.0, 1.0)?;
        if !(self.spawn_radius >= 0.0) {
            return bad("spawn_radius must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeSegment {
    pub kind: MotionModelKind,
    pub duration: usize,
    pub latents: LatentKinematics,
    /// speed at the start of the segment (m/s)
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub id: usize,
    /// World-frame ground truth per frame.
    pub gt: Vec<Anchor>,
    /// `regimes[k]` generated the step `k−1 → k`; `regimes[0]` repeats the
    /// first segment's kind.
    pub regimes: Vec<MotionModelKind>,
    /// Latents used for the step into frame `k` (`latents[0]` unused).
    pub latents: Vec<LatentKinematics>,
    pub segments: Vec<RegimeSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub dt: f64,
    /// `poses[k]` maps ego frame `k` into the world.
    pub poses: Vec<EgoTransform>,
    pub tracks: Vec<ObjectTrack>,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.poses.len()
    }

    /// Rigid transform from ego frame `from` to ego frame `to`.
    pub fn frame_transform(&self, from: usize, to: usize) -> EgoTransform {
        compose(&self.poses[from], &invert(&self.poses[to]))
    }

    /// Ground truth of `track` at frame `k`, in ego frame `k`.
    pub fn gt_in_frame(&self, track: usize, k: usize) -> Anchor {
        let aug = build_augmented(&invert(&self.poses[k])).expect("rigid pose");
        warp_anchor(&self.tracks[track].gt[k], &aug)
    }
}

/// ChaCha8 stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn signed(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    let v = uniform(rng, r);
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

fn draw_kind(rng: &mut impl Rng, mix: &RegimeMix, kinds: &[MotionModelKind]) -> MotionModelKind {
    let total: f64 = kinds.iter().map(|&k| mix.weight(k)).sum();
    let mut u = rng.random_range(0.0..total);
    for &k in kinds {
        let w = mix.weight(k);
        if u < w {
            return k;
        }
        u -= w;
    }
    *kinds.iter().rev().find(|&&k| mix.weight(k) > 0.0).expect("positive total")
}

const MOVING: [MotionModelKind; 4] =
    [MotionModelKind::Cv, MotionModelKind::Ca, MotionModelKind::Ctrv, MotionModelKind::Ctra];

/// Segment latents, with acceleration signs flipped when the segment would
/// leave the speed bounds.
fn segment_latents(
    rng: &mut impl Rng,
    kind: MotionModelKind,
    cfg: &SceneConfig,
    state: &Anchor,
    duration: usize,
) -> LatentKinematics {
    let speed = state.speed();
    let mut accel = signed(rng, cfg.accel);
    let end = speed + accel * duration as f64 * cfg.dt;
    if end < cfg.speed[0].min(speed) || end > cfg.speed[1].max(speed) {
        accel = -accel;
    }
    let omega = signed(rng, cfg.turn_rate);
    let (c, s) = (state.yaw[0], state.yaw[1]);
    match kind {
        MotionModelKind::Cv | MotionModelKind::Static => LatentKinematics::default(),
        MotionModelKind::Ca => LatentKinematics { ax: accel * c, ay: accel * s, ..Default::default() },
        MotionModelKind::Ctrv => LatentKinematics { omega, ..Default::default() },
        MotionModelKind::Ctra => LatentKinematics { a: accel, omega, ..Default::default() },
    }
}

fn generate_track(cfg: &SceneConfig, id: usize, rng: &mut impl Rng) -> Result<ObjectTrack, SimError> {
    let kinds = MotionModelKind::ALL;
    let parked = draw_kind(rng, &cfg.mix, &kinds) == MotionModelKind::Static;
    let r = cfg.spawn_radius * rng.random::<f64>().sqrt();
    let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = if parked { 0.0 } else { uniform(rng, cfg.speed) };
    let size = [rng.random_range(1.6..2.2), rng.random_range(3.8..5.2), rng.random_range(1.4..1.9)];
    let z = rng.random_range(-0.3..0.3);
    let start = Anchor::new(
        [r * phi.cos(), r * phi.sin(), z],
        size,
        heading,
        [speed * heading.cos(), speed * heading.sin()],
    );

    let moving_allowed = MOVING.iter().any(|&k| cfg.mix.weight(k) > 0.0);
    let mut gt = vec![start];
    let mut regimes = Vec::with_capacity(cfg.frames);
    let mut latents = vec![LatentKinematics::default()];
    let mut segments = Vec::new();
    while gt.len() < cfg.frames {
        let kind = if parked || !moving_allowed {
            MotionModelKind::Static
        } else {
            draw_kind(rng, &cfg.mix, &MOVING)
        };
        let duration = if parked {
            cfg.frames - 1
        } else {
            rng.random_range(cfg.segment_frames[0]..=cfg.segment_frames[1]).min(cfg.frames - gt.len())
        };
        let state = *gt.last().expect("non-empty");
        let lat = segment_latents(rng, kind, cfg, &state, duration);
        segments.push(RegimeSegment { kind, duration, latents: lat, speed: state.speed() });
        if regimes.is_empty() {
            regimes.push(kind);
        }
        for _ in 0..duration {
            let prev = *gt.last().expect("non-empty");
            gt.push(predict(kind, &prev, cfg.dt, &lat)?);
            regimes.push(kind);
            latents.push(lat);
        }
    }
    Ok(ObjectTrack { id, gt, regimes, latents, segments })
}

fn ego_poses(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<EgoTransform> {
    let speed = uniform(rng, cfg.ego.speed);
    let yaw_rate = signed(rng, cfg.ego.yaw_rate);
    let (mut x, mut y, mut psi) = (0.0f64, 0.0f64, 0.0f64);
    let mut poses = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        poses.push(EgoTransform::from_yaw(psi, [x, y, 0.0]));
        x += speed * cfg.dt * psi.cos();
        y += speed * cfg.dt * psi.sin();
        psi += yaw_rate * cfg.dt;
    }
    poses
}

/// One scene; ego motion uses stream 0 and track `i` stream `i + 1`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene, SimError> {
    cfg.validate()?;
    let poses = ego_poses(cfg, &mut stream_rng(seed, 0));
    let tracks = (0..cfg.tracks)
        .map(|i| generate_track(cfg, i, &mut stream_rng(seed, i as u64 + 1)))
        .collect::<Result<_, _>>()?;
    Ok(Scene { seed, dt: cfg.dt, poses, tracks })
}

/// Seed of scene `index` within a set generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

pub fn generate_scenes(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<Scene>, SimError> {
    (0..count).map(|i| generate_scene(cfg, scene_seed(seed, i))).collect()
}

/// A single track alternating CV and CTRV segments of `segment` frames,
/// seen by a stationary ego. Returns the scene and the frames at which the
/// regime switches.
pub fn switching_scene(
    frames: usize,
    segment: usize,
    speed: f64,
    omega: f64,
    dt: f64,
    seed: u64,
) -> Result<(Scene, Vec<usize>), SimError> {
    if segment == 0 || frames < 2 {
        return Err(SimError::Config("switching scene needs segment ≥ 1 and frames ≥ 2".into()));
    }
    let mut rng = stream_rng(seed, 1);
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let start = Anchor::new([0.0, 0.0, 0.0], [1.9, 4.5, 1.6], heading, [speed * heading.cos(), speed * heading.sin()]);
    let mut gt = vec![start];
    let mut regimes = vec![MotionModelKind::Cv];
    let mut latents = vec![LatentKinematics::default()];
    let mut segments = Vec::new();
    let mut switches = Vec::new();
    let mut k = 0;
    while gt.len() < frames {
        let kind = if k % 2 == 0 { MotionModelKind::Cv } else { MotionModelKind::Ctrv };
        let w = if rng.random_bool(0.5) { omega } else { -omega };
        let lat = if kind == MotionModelKind::Ctrv { LatentKinematics { omega: w, ..Default::default() } } else { LatentKinematics::default() };
        let duration = segment.min(frames - gt.len());
        if k > 0 {
            switches.push(gt.len());
        }
        segments.push(RegimeSegment { kind, duration, latents: lat, speed });
        for _ in 0..duration {
            let prev = *gt.last().expect("non-empty");
            gt.push(predict(kind, &prev, dt, &lat)?);
            regimes.push(kind);
            latents.push(lat);
        }
        k += 1;
    }
    let track = ObjectTrack { id: 0, gt, regimes, latents, segments };
    let poses = vec![EgoTransform::identity(); frames];
    Ok((Scene { seed, dt, poses, tracks: vec![track] }, switches))
}
