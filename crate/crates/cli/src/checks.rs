//! Oracle checks shared by `hat selftest` and the acceptance suite. Each
//! returns the measured quantity next to its threshold.

use hat_core::baselines::{imm_step, kf_predict, kf_update, ImmState, KalmanState};
use hat_core::geometry::{build_augmented, invert, warp_anchor, Anchor, EgoTransform};
use hat_core::hat::{align, BoundHat, HatConfig, HatParameters, InstanceBank};
use hat_core::motion::{integrate_oracle, predict, LatentKinematics, MotionModelKind, OMEGA_EPS};
use hat_core::sim::{observe, switching_scene, FilterConfig, NoiseConfig};
use hat_core::tensor::{
    analytic_gradients, compare_gradients, grad_check, Graph, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use MotionModelKind::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), passed: value <= threshold, value, threshold, detail }
    }

    pub fn at_least(name: &str, value: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), passed: value >= threshold, value, threshold, detail }
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{verdict} {}: {:.3e} (threshold {:.3e}) {}", self.name, self.value, self.threshold, self.detail)
    }
}

fn heading_aligned(rng: &mut ChaCha8Rng, max_speed: f64) -> Anchor {
    let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let v = rng.random_range(0.0..=max_speed);
    Anchor::new(
        [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-1.0..1.0)],
        [rng.random_range(0.5..3.0), rng.random_range(0.5..6.0), rng.random_range(0.5..3.0)],
        th,
        [v * th.cos(), v * th.sin()],
    )
}

fn random_latents(rng: &mut ChaCha8Rng) -> LatentKinematics {
    let mut u = || rng.random_range(-0.1..=0.1);
    LatentKinematics { ax: u(), ay: u(), a: u(), omega: u() }
}

fn position_gap(a: &Anchor, b: &Anchor) -> f64 {
    (0..3).map(|i| (a.position[i] - b.position[i]).abs()).fold(0.0, f64::max)
}

fn max_gap(a: &Anchor, b: &Anchor) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Closed forms against 1024-step RK4 over dt ∈ {0.1, 0.5}, speed ≤ 20,
/// |ω|, |a| ≤ 0.1.
pub fn kinematics(draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let dt = [0.1, 0.5][i % 2];
        let a = heading_aligned(&mut rng, 20.0);
        let lat = random_latents(&mut rng);
        for kind in MotionModelKind::ALL {
            let closed = predict(kind, &a, dt, &lat).expect("valid inputs");
            let oracle = integrate_oracle(kind, &a, dt, &lat, 1024).expect("valid inputs");
            worst = worst.max(position_gap(&closed, &oracle));
        }
    }
    Check::at_most("kinematics oracle", worst, 1e-8, format!("max position error over {draws} draws x 5 models"))
}

/// CA(a=0)=CV, CTRA(a=0)=CTRV, CTRA(a=0, ω=0)=CV within 1e-9 and the
/// CTRV(ω=1e-6) vs CV position gap within 1e-4. Reports the worst ratio of
/// error to tolerance.
pub fn degeneracy(draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let dt = [0.1, 0.5][i % 2];
        let a = heading_aligned(&mut rng, 20.0);
        let l = random_latents(&mut rng);
        let p = |kind, lat: LatentKinematics| predict(kind, &a, dt, &lat).expect("valid inputs");
        let cv = p(Cv, l);
        let coast = LatentKinematics { a: 0.0, ..l };
        let ratios = [
            max_gap(&p(Ca, LatentKinematics { ax: 0.0, ay: 0.0, ..l }), &cv) / 1e-9,
            max_gap(&p(Ctra, coast), &p(Ctrv, coast)) / 1e-9,
            max_gap(&p(Ctra, LatentKinematics { omega: 0.0, ..coast }), &cv) / 1e-9,
            position_gap(&p(Ctrv, LatentKinematics { omega: OMEGA_EPS, ..l }), &cv) / 1e-4,
            position_gap(&p(Static, l), &a) / 1e-9,
        ];
        worst = ratios.into_iter().fold(worst, f64::max);
    }
    Check::at_most("degeneracy lattice", worst, 1.0, format!("worst error/tolerance over {draws} anchors"))
}

/// Warp followed by the inverse warp returns the anchor.
pub fn warp_roundtrip(draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let a = heading_aligned(&mut rng, 20.0);
        let e = random_ego(&mut rng);
        let fwd = build_augmented(&e).expect("rigid");
        let back = build_augmented(&invert(&e)).expect("rigid");
        worst = worst.max(max_gap(&warp_anchor(&warp_anchor(&a, &fwd), &back), &a));
    }
    Check::at_most("warp round trip", worst, 1e-9, format!("max component error over {draws} anchors"))
}

fn random_ego(rng: &mut ChaCha8Rng) -> EgoTransform {
    EgoTransform::from_yaw(rng.random_range(-0.2..0.2), [rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0), 0.0])
}

fn random_bank(k: usize, c: usize, rng: &mut ChaCha8Rng) -> InstanceBank {
    let anchors = (0..k).map(|_| heading_aligned(rng, 15.0)).collect();
    let q = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    InstanceBank::new(anchors, Tensor::new(&[k, c], q).expect("shape")).expect("bank")
}

/// Pre-refine anchors stay inside the per-dimension hypothesis range.
/// Every batch of 100 instances gets freshly drawn weights.
pub fn hull(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = HatConfig::new(16, MotionModelKind::ALL.to_vec()).expect("valid");
    let mut worst = f64::NEG_INFINITY;
    let mut done = 0;
    while done < instances {
        let k = (instances - done).min(100);
        let params = HatParameters::init(config.clone(), &mut rng).expect("valid");
        let r = align(&random_bank(k, 16, &mut rng), 0.5, &random_ego(&mut rng), &params).expect("align");
        for (pre, hyps) in r.anchors_pre_refine.iter().zip(&r.hypotheses) {
            let pre = pre.to_array();
            for d in 0..pre.len() {
                let lo = hyps.iter().map(|h| h.to_array()[d]).fold(f64::INFINITY, f64::min);
                let hi = hyps.iter().map(|h| h.to_array()[d]).fold(f64::NEG_INFINITY, f64::max);
                worst = worst.max(lo - pre[d]).max(pre[d] - hi);
            }
        }
        done += k;
    }
    Check::at_most("hull bound", worst.max(0.0), 1e-12, format!("max excursion over {instances} instances"))
}

/// Finite differences over every HAT parameter (K=2, M=5, C=16), and a
/// corrupted copy of the analytic gradient that must be flagged.
pub fn gradient(seed: u64) -> (Check, Check) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = HatParameters::init(HatConfig::new(16, MotionModelKind::ALL.to_vec()).expect("valid"), &mut rng)
        .expect("valid");
    let mut bank = random_bank(2, 16, &mut rng);
    // keep the embedding inputs in the unit range so no ReLU sits on a kink
    for a in &mut bank.anchors {
        a.position = [a.position[0] / 40.0, a.position[1] / 40.0, a.position[2]];
        a.velocity = [a.velocity[0] / 10.0, a.velocity[1] / 10.0];
    }
    let aug = build_augmented(&random_ego(&mut rng)).expect("rigid");
    let wa: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wf: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tensors: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    let config = p.config.clone();
    let f = |g: &mut Graph, vars: &[Var]| {
        let to_t = |e: hat_core::hat::HatError| TensorError::Contract(e.to_string());
        let b = BoundHat::from_vars(&config, vars).map_err(to_t)?;
        let q = g.constant(bank.queries.clone());
        let v = b.forward(g, &bank.anchors, q, 0.5, &[aug]).map_err(to_t)?;
        let la = g.weighted_sum(v.anchors, wa.clone())?;
        let lf = g.weighted_sum(v.features, wf.clone())?;
        g.add(la, lf)
    };
    let report = grad_check(&tensors, f).expect("finite objective");
    let honest = Check::at_most(
        "gradient integrity",
        report.max_rel_error,
        1e-4,
        format!("align pipeline, {} tensors", tensors.len()),
    );

    let (_, mut corrupted) = analytic_gradients(&tensors, &f).expect("finite objective");
    let t = report.worst_param;
    let scale = corrupted[t].data().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
    corrupted[t].data_mut()[0] += scale;
    let (err, _) = compare_gradients(&corrupted, &report.numeric);
    let control = Check {
        name: "gradient negative control".into(),
        passed: err > 1e-2,
        value: err,
        threshold: 1e-2,
        detail: "corrupted gradient must exceed the threshold".into(),
    };
    (honest, control)
}

/// Per-seed outcome of the switching-scene filter comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImmTrial {
    pub imm_rmse: f64,
    pub kf_rmse: [f64; 2],
    /// worst frames-to-majority over the switches (frames count when the
    /// majority never arrives)
    pub delay: usize,
}

fn planar_error(s: &KalmanState, gt: &Anchor) -> f64 {
    (s.mean[0] - gt.position[0]).hypot(s.mean[1] - gt.position[1])
}

pub fn imm_trial(seed: u64) -> ImmTrial {
    let (scene, switches) = switching_scene(80, 20, 10.0, 0.1, 0.5, seed).expect("valid scene");
    let noise = NoiseConfig::default();
    let obs = observe(&scene, &noise, seed).expect("valid noise");
    let track = &scene.tracks[0];
    let z: Vec<Anchor> = obs.anchors.iter().map(|f| f[0]).collect();
    let fc = FilterConfig::default();
    let mn = FilterConfig::measurement(&noise);
    let models = [Cv, Ctrv];

    let mut kfs: Vec<KalmanState> = models.iter().map(|&k| KalmanState::from_anchor(k, &z[0], fc.initial_std)).collect();
    let mut imm = ImmState::from_anchor(&models, &z[0], fc.initial_std, fc.self_transition).expect("valid imm");
    let (mut sq_imm, mut sq_kf) = (0.0, [0.0; 2]);
    let mut first_majority = vec![None; switches.len()];
    for k in 1..z.len() {
        for (i, kf) in kfs.iter_mut().enumerate() {
            let pred = kf_predict(kf, scene.dt, &fc.process).expect("kf predict");
            *kf = kf_update(&pred, &z[k], &mn).expect("kf update");
            sq_kf[i] += planar_error(kf, &track.gt[k]).powi(2);
        }
        imm = imm_step(&imm, scene.dt, &z[k], &fc.process, &mn).expect("imm step").0;
        sq_imm += planar_error(&imm.estimate(), &track.gt[k]).powi(2);
        let active = models.iter().position(|m| *m == track.regimes[k]).expect("cv or ctrv");
        for (s, first) in switches.iter().zip(first_majority.iter_mut()) {
            let next = switches.iter().find(|&&n| n > *s).copied().unwrap_or(z.len());
            if k >= *s && k < next && first.is_none() && imm.probabilities[active] > 0.5 {
                *first = Some(k - s);
            }
        }
    }
    let n = (z.len() - 1) as f64;
    let delay = first_majority.iter().map(|d| d.unwrap_or(z.len())).max().unwrap_or(0);
    ImmTrial { imm_rmse: (sq_imm / n).sqrt(), kf_rmse: sq_kf.map(|s| (s / n).sqrt()), delay }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over seeds of IMM RMSE / best single-KF RMSE and of the worst
/// switch delay.
pub fn imm(seeds: usize) -> (Check, Check) {
    let trials: Vec<ImmTrial> = (0..seeds as u64).map(|s| imm_trial(1000 + s)).collect();
    let ratio = median(trials.iter().map(|t| t.imm_rmse / t.kf_rmse[0].min(t.kf_rmse[1])).collect());
    let delay = median(trials.iter().map(|t| t.delay as f64).collect());
    let mean = |f: &dyn Fn(&ImmTrial) -> f64| trials.iter().map(f).sum::<f64>() / trials.len() as f64;
    let detail = format!(
        "mean RMSE imm {:.3} / kf-cv {:.3} / kf-ctrv {:.3} m over {seeds} seeds",
        mean(&|t| t.imm_rmse),
        mean(&|t| t.kf_rmse[0]),
        mean(&|t| t.kf_rmse[1])
    );
    (
        Check::at_most("imm rmse ratio", ratio, 1.05, detail),
        Check::at_most("imm switch delay", delay, 10.0, format!("median frames to majority over {seeds} seeds")),
    )
}
