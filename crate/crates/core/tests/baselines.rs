use hat_core::baselines::*;
use hat_core::geometry::{build_augmented, warp_anchor, Anchor, EgoTransform};
use hat_core::hat::{align, HatConfig, HatParameters, InstanceBank};
use hat_core::motion::{predict, LatentHead, LatentKinematics, MotionModelKind};
use hat_core::sim::switching_scene;
use hat_core::tensor::{grad_check, BoundLinear, BoundMlp, Tensor, TensorError};
use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type M6 = SMatrix<f64, 6, 6>;
type V6 = SVector<f64, 6>;

fn moving(x: f64, y: f64, heading: f64, v: f64) -> Anchor {
    Anchor::new([x, y, 0.4], [1.9, 4.4, 1.6], heading, [v * heading.cos(), v * heading.sin()])
}

fn bank(anchors: Vec<Anchor>, c: usize, seed: u64) -> InstanceBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = anchors.len();
    let q = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    InstanceBank::new(anchors, Tensor::new(&[k, c], q).unwrap()).unwrap()
}

fn ego() -> EgoTransform {
    EgoTransform::from_yaw(0.2, [-3.0, 1.0, 0.0])
}

#[test]
fn cv_on_static_object_matches_static_position() {
    let parked = Anchor::new([4.0, -2.0, 0.3], [2.0, 4.5, 1.5], 1.1, [0.0, 0.0]);
    let b = bank(vec![parked; 3], 8, 0);
    let cv = single_model_sta(MotionModelKind::Cv, &b, 0.5, &ego()).unwrap();
    let st = single_model_sta(MotionModelKind::Static, &b, 0.5, &ego()).unwrap();
    for (a, s) in cv.iter().zip(&st) {
        assert_eq!(a.position, s.position);
    }
}

#[test]
fn single_model_equals_single_hypothesis_pre_refine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let anchors: Vec<Anchor> = (0..6)
        .map(|i| moving(i as f64 * 3.0, -(i as f64), rng.random_range(-3.0..3.0), rng.random_range(0.0..15.0)))
        .collect();
    for kind in MotionModelKind::ALL {
        let mut params = HatParameters::init(HatConfig::new(8, vec![kind]).unwrap(), &mut rng).unwrap();
        params.latent_head = LatentHead::zeros(8);
        let b = bank(anchors.clone(), 8, 4);
        let hat = align(&b, 0.5, &ego(), &params).unwrap();
        let single = single_model_sta(kind, &b, 0.5, &ego()).unwrap();
        for (h, s) in hat.anchors_pre_refine.iter().zip(&single) {
            for (x, y) in h.to_array().iter().zip(s.to_array()) {
                assert!((x - y).abs() <= 1e-12, "{kind}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn single_model_fixture_matches_hand_composition() {
    // CV over 0.5 s: (1, 2) + (3, -1)·0.5 = (2.5, 1.5); then a quarter turn
    // about z and a shift of (10, 0, 0): (−1.5, 2.5) + (10, 0) = (8.5, 2.5).
    let a = Anchor { position: [1.0, 2.0, 0.5], size: [2.0, 4.0, 1.5], yaw: [1.0, 0.0], velocity: [3.0, -1.0] };
    let e = EgoTransform::from_yaw(std::f64::consts::FRAC_PI_2, [10.0, 0.0, 0.0]);
    let out = single_model_sta(MotionModelKind::Cv, &bank(vec![a], 4, 0), 0.5, &e).unwrap()[0];
    let want = [8.5, 2.5, 0.5, 2.0, 4.0, 1.5, 0.0, 1.0, 1.0, 3.0];
    for (x, y) in out.to_array().iter().zip(want) {
        assert!((x - y).abs() < 1e-12, "{:?}", out);
    }
}

#[test]
fn implicit_with_zero_mlp_is_pure_ego_warp() {
    let anchors: Vec<Anchor> = (0..5).map(|i| moving(i as f64, 2.0 * i as f64, 0.4 * i as f64, 6.0)).collect();
    let b = bank(anchors.clone(), 8, 9);
    let out = implicit_sta(&b, 0.5, &ego(), &ImplicitParams::zeros(8)).unwrap();
    assert_eq!(out.len(), b.len());
    let aug = build_augmented(&ego()).unwrap();
    for (o, a) in out.iter().zip(&anchors) {
        let w = warp_anchor(a, &aug);
        for (x, y) in o.to_array().iter().zip(w.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn implicit_output_count_matches_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = ImplicitParams::init(8, &mut rng);
    for k in [1, 4, 17] {
        let b = bank((0..k).map(|i| moving(i as f64, 0.0, 0.1, 3.0)).collect(), 8, k as u64);
        assert_eq!(implicit_sta(&b, 0.5, &ego(), &p).unwrap().len(), k);
    }
}

#[test]
fn implicit_gradient_reaches_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = ImplicitParams::init(8, &mut rng);
    let anchors: Vec<Anchor> = (0..3).map(|i| moving(i as f64, 1.0, 0.5 + i as f64, 8.0)).collect();
    let b = bank(anchors.clone(), 8, 5);
    let aug = build_augmented(&ego()).unwrap();
    let warped: Vec<f64> = anchors.iter().flat_map(|a| warp_anchor(a, &aug).to_array()).collect();
    let target: Vec<f64> = (0..30).map(|j| (j as f64 * 0.37).cos()).collect();
    let params: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    let report = grad_check(&params, |g, v| {
        let bound = BoundImplicit {
            residual: BoundMlp {
                first: BoundLinear { weight: v[0], bias: v[1] },
                second: BoundLinear { weight: v[2], bias: v[3] },
            },
        };
        let w = g.constant(Tensor::new(&[3, 10], warped.clone()).unwrap());
        let q = g.constant(b.queries.clone());
        let out = bound.forward(g, w, q).map_err(|e| TensorError::Contract(e.to_string()))?;
        g.weighted_sum(out, target.clone())
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    for t in &report.analytic {
        assert!(t.data().iter().any(|x| x.abs() > 1e-6), "a residual tensor received no gradient");
    }
}

fn cv_truth(steps: usize, dt: f64) -> Vec<Anchor> {
    let mut t = vec![moving(2.0, -1.0, 0.7, 9.0)];
    for _ in 0..steps {
        let last = *t.last().unwrap();
        t.push(predict(MotionModelKind::Cv, &last, dt, &LatentKinematics::default()).unwrap());
    }
    t
}

#[test]
fn kf_without_noise_tracks_exact_cv_truth() {
    let truth = cv_truth(20, 0.5);
    let mut s = KalmanState::from_anchor(MotionModelKind::Cv, &truth[0], [1.0; 6]);
    for a in &truth[1..] {
        s = kf_predict(&s, 0.5, &ProcessNoise::zero()).unwrap();
        s = kf_update(&s, a, &MeasurementNoise::new(0.0, 0.0, 0.0)).unwrap();
        let est = s.to_anchor(a);
        for (x, y) in est.to_array().iter().zip(a.to_array()) {
            assert!((x - y).abs() < 1e-9, "{est:?} vs {a:?}");
        }
    }
}

#[test]
fn infinite_measurement_noise_leaves_mean_unchanged() {
    let s = kf_predict(&KalmanState::from_anchor(MotionModelKind::Ctra, &moving(0.0, 0.0, 0.2, 7.0), [0.5; 6]), 0.5, &ProcessNoise::default()).unwrap();
    let far = moving(30.0, -12.0, 2.5, 1.0);
    let u = kf_update(&s, &far, &MeasurementNoise { std: [f64::INFINITY; 6] }).unwrap();
    assert_eq!(u.mean, s.mean);
    // continuity: enormous but finite noise barely moves it
    let v = kf_update(&s, &far, &MeasurementNoise { std: [1e9; 6] }).unwrap();
    assert!((v.mean - s.mean).amax() < 1e-9);
}

/// Textbook EKF update with a central-difference observation Jacobian.
fn oracle_update(mean: &V6, cov: &M6, z: &[f64; 6], std: &[f64; 6]) -> (V6, M6) {
    let h_of = |x: &V6| V6::from([x[0], x[1], x[2].cos(), x[2].sin(), x[3] * x[2].cos(), x[3] * x[2].sin()]);
    let mut h = M6::zeros();
    for c in 0..6 {
        let mut p = *mean;
        let mut m = *mean;
        p[c] += 1e-6;
        m[c] -= 1e-6;
        h.set_column(c, &((h_of(&p) - h_of(&m)) / 2e-6));
    }
    let r = M6::from_diagonal(&V6::from(std.map(|s| s * s)));
    let s = h * cov * h.transpose() + r;
    let k = cov * h.transpose() * s.try_inverse().unwrap();
    let y = V6::from(*z) - h_of(mean);
    (mean + k * y, (M6::identity() - k * h) * cov)
}

#[test]
fn kf_update_matches_textbook_oracle_and_shrinks_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let obs0 = moving(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-3.0..3.0), rng.random_range(1.0..15.0));
        let s = kf_predict(&KalmanState::from_anchor(MotionModelKind::Ctra, &obs0, [0.8, 0.8, 0.2, 1.0, 0.1, 0.2]), 0.5, &ProcessNoise::default()).unwrap();
        let mut z = s.to_anchor(&obs0);
        z.position[0] += rng.random_range(-0.5..0.5);
        z.velocity[1] += rng.random_range(-0.5..0.5);
        let noise = MeasurementNoise::new(0.3, 0.05, 0.2);
        let u = kf_update(&s, &z, &noise).unwrap();
        let zz = [z.position[0], z.position[1], z.yaw[0], z.yaw[1], z.velocity[0], z.velocity[1]];
        let (om, oc) = oracle_update(&s.mean, &s.covariance, &zz, &noise.std);
        assert!((u.mean - om).amax() < 1e-7, "{}", (u.mean - om).amax());
        assert!((u.covariance - oc).amax() < 1e-7, "{}", (u.covariance - oc).amax());
        assert!(u.covariance.trace() < s.covariance.trace());
    }
}

#[test]
fn covariance_stays_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in MotionModelKind::ALL {
        let mut s = KalmanState::from_anchor(kind, &moving(0.0, 0.0, 0.3, 8.0), [1.0; 6]);
        for i in 0..300 {
            s = kf_predict(&s, 0.5, &ProcessNoise::default()).unwrap();
            let obs = moving(
                4.0 * i as f64 * 0.5 + rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                0.3 + 0.1 * rng.sample::<f64, _>(StandardNormal),
                8.0 + rng.sample::<f64, _>(StandardNormal),
            );
            s = kf_update(&s, &obs, &MeasurementNoise::new(0.3, 0.05, 0.2)).unwrap();
            assert!((s.covariance - s.covariance.transpose()).amax() <= 1e-12);
            assert!(s.covariance.symmetric_eigenvalues().min() >= -1e-10);
        }
    }
}

fn noisy_walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<Anchor> {
    let (mut x, mut y, mut th, mut v) = (0.0f64, 0.0f64, 0.0f64, 5.0f64);
    (0..n)
        .map(|_| {
            th += rng.random_range(-0.2..0.2);
            v = (v + rng.random_range(-1.0..1.0)).clamp(0.0, 20.0);
            x += 0.5 * v * th.cos() + rng.random_range(-0.5..0.5);
            y += 0.5 * v * th.sin() + rng.random_range(-0.5..0.5);
            moving(x, y, th, v)
        })
        .collect()
}

#[test]
fn imm_with_one_model_is_plain_kf() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obs = noisy_walk(&mut rng, 60);
    let (pn, mn) = (ProcessNoise::default(), MeasurementNoise::new(0.3, 0.05, 0.2));
    for kind in MotionModelKind::ALL {
        let mut imm = ImmState::from_anchor(&[kind], &obs[0], [1.0; 6], 0.95).unwrap();
        let mut kf = KalmanState::from_anchor(kind, &obs[0], [1.0; 6]);
        for o in &obs[1..] {
            imm = imm_step(&imm, 0.5, o, &pn, &mn).unwrap().0;
            kf = kf_update(&kf_predict(&kf, 0.5, &pn).unwrap(), o, &mn).unwrap();
            assert_eq!(imm.filters[0], kf);
            assert_eq!(imm.probabilities, vec![1.0]);
        }
    }
}

#[test]
fn identity_transition_with_one_hot_mode_stays_on_that_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let obs = noisy_walk(&mut rng, 40);
    let (pn, mn) = (ProcessNoise::default(), MeasurementNoise::new(0.3, 0.05, 0.2));
    for hot in 0..5 {
        let mut imm = ImmState::from_anchor(&MotionModelKind::ALL, &obs[0], [1.0; 6], 1.0).unwrap();
        imm.probabilities = (0..5).map(|i| if i == hot { 1.0 } else { 0.0 }).collect();
        let mut kf = KalmanState::from_anchor(MotionModelKind::ALL[hot], &obs[0], [1.0; 6]);
        for o in &obs[1..] {
            imm = imm_step(&imm, 0.5, o, &pn, &mn).unwrap().0;
            kf = kf_update(&kf_predict(&kf, 0.5, &pn).unwrap(), o, &mn).unwrap();
            assert_eq!(imm.filters[hot], kf);
            assert_eq!(imm.probabilities[hot], 1.0);
        }
    }
}

#[test]
fn mode_probabilities_stay_normalised_over_long_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let obs = noisy_walk(&mut rng, 10_000);
    let (pn, mn) = (ProcessNoise::default(), MeasurementNoise::new(0.3, 0.05, 0.2));
    let mut imm = ImmState::from_anchor(&MotionModelKind::ALL, &obs[0], [1.0; 6], DEFAULT_SELF_TRANSITION).unwrap();
    for o in &obs[1..] {
        imm = imm_step(&imm, 0.5, o, &pn, &mn).unwrap().0;
        assert!(imm.probabilities.iter().all(|p| *p >= 0.0));
        assert!((imm.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn identical_models_match_a_single_kf() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let obs = noisy_walk(&mut rng, 200);
    let (pn, mn) = (ProcessNoise::default(), MeasurementNoise::new(0.3, 0.05, 0.2));
    let kind = MotionModelKind::Ctrv;
    let mut imm = ImmState::from_anchor(&[kind; 3], &obs[0], [1.0; 6], 0.9).unwrap();
    let mut kf = KalmanState::from_anchor(kind, &obs[0], [1.0; 6]);
    for o in &obs[1..] {
        imm = imm_step(&imm, 0.5, o, &pn, &mn).unwrap().0;
        kf = kf_update(&kf_predict(&kf, 0.5, &pn).unwrap(), o, &mn).unwrap();
        let est = imm.estimate();
        assert!((est.mean - kf.mean).amax() <= 1e-9);
        assert!((est.covariance - kf.covariance).amax() <= 1e-9);
    }
}

#[test]
fn underflowing_likelihoods_fall_back_to_uniform() {
    let obs = moving(0.0, 0.0, 0.0, 5.0);
    let imm = ImmState::from_anchor(&MotionModelKind::ALL, &obs, [1e-3; 6], 0.95).unwrap();
    let far = moving(1e160, -1e160, 0.0, 5.0);
    let (next, info) = imm_step(&imm, 0.5, &far, &ProcessNoise::default(), &MeasurementNoise::new(1e-3, 1e-3, 1e-3)).unwrap();
    assert!(info.uniform_fallback);
    assert_eq!(next.probabilities, vec![0.2; 5]);
}

#[test]
fn mode_mass_moves_to_ctrv_after_switch() {
    let (scene, switches) = switching_scene(60, 30, 12.0, 0.1, 0.5, 21).unwrap();
    let switch = switches[0];
    let track = &scene.tracks[0];
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut n = || rng.sample::<f64, _>(StandardNormal);
    let obs: Vec<Anchor> = track
        .gt
        .iter()
        .map(|a| {
            let mut o = *a;
            o.position[0] += 0.1 * n();
            o.position[1] += 0.1 * n();
            o.velocity[0] += 0.1 * n();
            o.velocity[1] += 0.1 * n();
            o
        })
        .collect();
    let models = [MotionModelKind::Cv, MotionModelKind::Ctrv];
    let (pn, mn) = (ProcessNoise::default(), MeasurementNoise::new(0.1, 0.05, 0.1));
    let mut imm = ImmState::from_anchor(&models, &obs[0], [0.3, 0.3, 0.05, 0.3, 0.05, 0.1], 0.95).unwrap();
    let mut first_majority = None;
    for (k, o) in obs.iter().enumerate().skip(1) {
        imm = imm_step(&imm, scene.dt, o, &pn, &mn).unwrap().0;
        if k >= switch && first_majority.is_none() && imm.probabilities[1] > 0.5 {
            first_majority = Some(k);
        }
    }
    let k = first_majority.expect("CTRV never took the majority");
    assert!(k - switch <= 10, "majority after {} frames", k - switch);
}
