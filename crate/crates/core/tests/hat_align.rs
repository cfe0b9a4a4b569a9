use hat_core::geometry::{build_augmented, warp_anchor, yaw_normalize, Anchor, EgoTransform};
use hat_core::hat::{
    align, build_feature_hypotheses, compute_dynamic_weights, decode_anchor, decode_anchor_weights,
    encode_motion_embedding, fuse_features, generate_anchor_hypotheses, io::Provenance,
    mix_feature_anchor, BoundHat, DecoderWeights, HatConfig, HatParameters, InstanceBank,
    EMBED_INPUT_SCALE,
};
use hat_core::motion::{decode_latents, predict, MotionModelKind};
use hat_core::tensor::{grad_check, LayerNormLayer, LinearLayer, Mlp, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL: [MotionModelKind; 5] = MotionModelKind::ALL;

fn params(c: usize, models: &[MotionModelKind], seed: u64) -> HatParameters {
    HatParameters::init(HatConfig::new(c, models.to_vec()).unwrap(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_anchor(rng: &mut impl Rng) -> Anchor {
    let heading = rng.random_range(-3.1..3.1f64);
    let speed = rng.random_range(0.0..15.0);
    Anchor::new(
        [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-1.0..1.0)],
        [rng.random_range(0.5..3.0), rng.random_range(0.5..6.0), rng.random_range(0.5..3.0)],
        heading,
        [speed * heading.cos(), speed * heading.sin()],
    )
}

fn random_bank(k: usize, c: usize, rng: &mut impl Rng) -> InstanceBank {
    let anchors = (0..k).map(|_| random_anchor(rng)).collect();
    let q = (0..k * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    InstanceBank::new(anchors, Tensor::new(&[k, c], q).unwrap()).unwrap()
}

fn random_ego(rng: &mut impl Rng) -> EgoTransform {
    EgoTransform::from_yaw(rng.random_range(-0.2..0.2), [rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0), 0.0])
}

// Plain-loop references for the learned blocks.

fn linear_ref(x: &[f64], l: &LinearLayer) -> Vec<f64> {
    let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
    (0..out)
        .map(|o| {
            let mut s = l.bias.data()[o];
            for i in 0..inp {
                s += l.weight.data()[o * inp + i] * x[i];
            }
            s
        })
        .collect()
}

fn mlp_ref(x: &[f64], m: &Mlp) -> Vec<f64> {
    let h: Vec<f64> = linear_ref(x, &m.first).into_iter().map(|v| v.max(0.0)).collect();
    linear_ref(&h, &m.second)
}

fn ln_ref(x: &[f64], ln: &LayerNormLayer) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + ln.epsilon).sqrt() * ln.gain.data()[j] + ln.shift.data()[j])
        .collect()
}

fn embed_ref(a: &Anchor, p: &HatParameters) -> Vec<f64> {
    let s: Vec<f64> = a.to_array().iter().zip(EMBED_INPUT_SCALE).map(|(v, k)| v * k).collect();
    let mut out = mlp_ref(&s[0..3], &p.encoders.position);
    out.extend(mlp_ref(&s[3..6], &p.encoders.size));
    out.extend(mlp_ref(&s[6..8], &p.encoders.yaw));
    out.extend(mlp_ref(&s[8..10], &p.encoders.velocity));
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

#[test]
fn static_object_cv_and_static_coincide() {
    let p = params(8, &ALL, 1);
    let a = Anchor::new([3.0, 1.0, 0.2], [2.0, 4.0, 1.5], 0.4, [0.0, 0.0]);
    let bank = InstanceBank::new(vec![a], Tensor::zeros(&[1, 8])).unwrap();
    let h = generate_anchor_hypotheses(&bank, 0.5, &EgoTransform::identity(), &p).unwrap();
    assert_eq!(h[0][0].position, h[0][1].position);
}

#[test]
fn moving_object_cv_and_static_differ_by_displacement() {
    let p = params(8, &ALL, 1);
    let a = Anchor::new([3.0, 1.0, 0.2], [2.0, 4.0, 1.5], 0.0, [6.0, 0.0]);
    let bank = InstanceBank::new(vec![a], Tensor::zeros(&[1, 8])).unwrap();
    let h = generate_anchor_hypotheses(&bank, 0.5, &EgoTransform::identity(), &p).unwrap();
    assert_eq!(h[0][0].position[0] - h[0][1].position[0], 3.0);
}

#[test]
fn hypotheses_match_manual_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = params(8, &ALL, 3);
    let bank = random_bank(4, 8, &mut rng);
    let ego = random_ego(&mut rng);
    let aug = build_augmented(&ego).unwrap();
    let h = generate_anchor_hypotheses(&bank, 0.5, &ego, &p).unwrap();
    for (i, a) in bank.anchors.iter().enumerate() {
        let lat = decode_latents(bank.queries.row(i), &p.latent_head).unwrap();
        for (m, &kind) in ALL.iter().enumerate() {
            let expect = warp_anchor(&predict(kind, a, 0.5, &lat).unwrap(), &aug);
            assert_eq!(h[i][m], expect, "instance {i} model {kind}");
        }
    }
}

#[test]
fn embedding_is_state_decoupled() {
    let p = params(16, &ALL, 4);
    let a = Anchor::new([1.0, 2.0, 0.0], [2.0, 4.0, 1.5], 0.3, [1.0, 0.5]);
    let b = Anchor { position: [7.0, -3.0, 0.4], ..a };
    let e = encode_motion_embedding(&[a, b], &p).unwrap();
    let (ea, eb) = (e.row(0), e.row(1));
    assert_ne!(ea[..4], eb[..4]);
    assert_eq!(ea[4..], eb[4..]);
}

#[test]
fn zero_encoders_give_bias_only_embedding() {
    let mut p = HatParameters::zeros(HatConfig::new(8, ALL.to_vec()).unwrap()).unwrap();
    p.encoders.yaw.second.bias = Tensor::vector(vec![0.5, -1.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchors: Vec<Anchor> = (0..3).map(|_| random_anchor(&mut rng)).collect();
    let e = encode_motion_embedding(&anchors, &p).unwrap();
    for r in 0..3 {
        assert_eq!(e.row(r), &[0.0, 0.0, 0.0, 0.0, 0.5, -1.5, 0.0, 0.0]);
    }
}

#[test]
fn embedding_matches_row_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = params(16, &ALL, 7);
    let anchors: Vec<Anchor> = (0..15).map(|_| random_anchor(&mut rng)).collect();
    let e = encode_motion_embedding(&anchors, &p).unwrap();
    for (i, a) in anchors.iter().enumerate() {
        assert!(close(e.row(i), &embed_ref(a, &p), 1e-13));
    }
}

#[test]
fn feature_hypotheses_broadcast_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (k, m, c) = (3, 4, 5);
    let e: Vec<f64> = (0..k * m * c).map(|_| rng.random()).collect();
    let q: Vec<f64> = (0..k * c).map(|_| rng.random()).collect();
    let out = build_feature_hypotheses(&Tensor::new(&[k, m, c], e.clone()).unwrap(), &Tensor::new(&[k, c], q.clone()).unwrap()).unwrap();
    assert_eq!(out.shape(), &[k, m, 2 * c]);
    for i in 0..k {
        for j in 0..m {
            for ch in 0..c {
                assert_eq!(out.get(&[i, j, ch]), e[(i * m + j) * c + ch]);
                assert_eq!(out.get(&[i, j, c + ch]), q[i * c + ch]);
            }
        }
    }
    let single = build_feature_hypotheses(&Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap(), &Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(single.data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn zero_generators_give_zero_channel_weights() {
    let mut p = HatParameters::zeros(HatConfig::new(8, ALL.to_vec()).unwrap()).unwrap();
    p.feature_fusion.bias = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bank = random_bank(2, 8, &mut rng);
    let w = compute_dynamic_weights(&bank, &random_ego(&mut rng), &p).unwrap();
    assert!(w.channel.data().iter().all(|&v| v == 0.0));
    for i in 0..2 {
        assert_eq!(w.feature.row(i), &[0.1, 0.2, 0.3, 0.4, 0.5]);
    }
}

#[test]
fn identical_instances_share_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = params(8, &ALL, 11);
    let one = random_bank(1, 8, &mut rng);
    let bank = InstanceBank::new(
        vec![one.anchors[0]; 2],
        Tensor::new(&[2, 8], [one.queries.data(), one.queries.data()].concat()).unwrap(),
    )
    .unwrap();
    let w = compute_dynamic_weights(&bank, &random_ego(&mut rng), &p).unwrap();
    let per = 16 * 16;
    assert_eq!(w.channel.data()[..per], w.channel.data()[per..]);
    assert_eq!(w.feature.row(0), w.feature.row(1));
}

#[test]
fn channel_weight_layout_matches_flat_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = 8;
    let p = params(c, &ALL, 13);
    let bank = random_bank(3, c, &mut rng);
    let ego = random_ego(&mut rng);
    let aug = build_augmented(&ego).unwrap();
    let w = compute_dynamic_weights(&bank, &ego, &p).unwrap();
    for i in 0..3 {
        let mut cond = embed_ref(&warp_anchor(&bank.anchors[i], &aug), &p);
        cond.extend_from_slice(bank.queries.row(i));
        let flat = linear_ref(&cond, &p.channel_fusion);
        for r in 0..2 * c {
            for col in 0..2 * c {
                let v = w.channel.get(&[i, r, col]);
                assert!((v - flat[r * 2 * c + col]).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }
        assert!(close(w.feature.row(i), &linear_ref(&cond, &p.feature_fusion), 1e-12));
    }
}

fn random_weights(k: usize, m: usize, c2: usize, rng: &mut impl Rng) -> (Tensor, DecoderWeights) {
    let h = Tensor::new(&[k, m, c2], (0..k * m * c2).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let wc = Tensor::new(&[k, c2, c2], (0..k * c2 * c2).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    let wf = Tensor::new(&[k, m], (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    (h, DecoderWeights { channel: wc, feature: wf, anchor: None })
}

fn fuse_ref(h: &Tensor, w: &DecoderWeights, p: &HatParameters) -> Vec<Vec<f64>> {
    let (k, m, c2) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    (0..k)
        .map(|i| {
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|j| {
                    let prod: Vec<f64> = (0..c2)
                        .map(|col| (0..c2).map(|r| h.get(&[i, j, r]) * w.channel.get(&[i, r, col])).sum())
                        .collect();
                    ln_ref(&prod, &p.norm_channel).into_iter().map(|v| v.max(0.0)).collect()
                })
                .collect();
            let pooled: Vec<f64> = (0..c2).map(|col| (0..m).map(|j| w.feature.get(&[i, j]) * rows[j][col]).sum()).collect();
            ln_ref(&pooled, &p.norm_feature).into_iter().map(|v| v.max(0.0)).collect()
        })
        .collect()
}

#[test]
fn fuse_matches_instance_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut p = params(8, &ALL, 15);
    for v in p.norm_channel.gain.data_mut().iter_mut().chain(p.norm_feature.shift.data_mut()) {
        *v = rng.random_range(0.5..1.5);
    }
    let (h, w) = random_weights(3, 5, 16, &mut rng);
    let out = fuse_features(&h, &w, &p).unwrap();
    for (i, r) in fuse_ref(&h, &w, &p).iter().enumerate() {
        assert!(close(out.row(i), r, 1e-12));
    }
}

#[test]
fn fuse_single_hypothesis_reduces_to_normalised_row() {
    let p = params(4, &[MotionModelKind::Cv], 16);
    let row: Vec<f64> = vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4, 1.1, 0.0];
    let mut eye = vec![0.0; 64];
    for d in 0..8 {
        eye[d * 8 + d] = 1.0;
    }
    let w = DecoderWeights {
        channel: Tensor::new(&[1, 8, 8], eye).unwrap(),
        feature: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
        anchor: None,
    };
    let out = fuse_features(&Tensor::new(&[1, 1, 8], row.clone()).unwrap(), &w, &p).unwrap();
    let once: Vec<f64> = ln_ref(&row, &p.norm_channel).into_iter().map(|v| v.max(0.0)).collect();
    let twice: Vec<f64> = ln_ref(&once, &p.norm_feature).into_iter().map(|v| v.max(0.0)).collect();
    assert!(close(out.row(0), &twice, 1e-14));
}

#[test]
fn fuse_is_invariant_to_hypothesis_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = params(8, &ALL, 18);
    let (h, w) = random_weights(2, 5, 16, &mut rng);
    let perm = [3, 0, 4, 1, 2];
    let mut hp = Vec::new();
    let mut wp = Vec::new();
    for i in 0..2 {
        for &j in &perm {
            hp.extend((0..16).map(|c| h.get(&[i, j, c])));
            wp.push(w.feature.get(&[i, j]));
        }
    }
    let wperm = DecoderWeights { feature: Tensor::new(&[2, 5], wp).unwrap(), ..w.clone() };
    let a = fuse_features(&h, &w, &p).unwrap();
    let b = fuse_features(&Tensor::new(&[2, 5, 16], hp).unwrap(), &wperm, &p).unwrap();
    assert!(close(a.data(), b.data(), 1e-12));
}

#[test]
fn anchor_weights_behaviour() {
    let mut p = params(8, &ALL, 19);
    let wf = Tensor::new(&[2, 5], vec![0.3, -1.0, 2.0, 0.1, 0.5, 1.0, 1.1, -0.2, 0.0, 0.9]).unwrap();
    let mut zero = p.clone();
    zero.anchor_weight = LinearLayer::zeros(1, 1);
    let u = decode_anchor_weights(&wf, &zero).unwrap();
    assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    p.anchor_weight.weight = Tensor::new(&[1, 1], vec![0.7]).unwrap();
    let wa = decode_anchor_weights(&wf, &p).unwrap();
    let argmax = |r: &[f64]| r.iter().enumerate().fold(0, |b, (i, v)| if *v > r[b] { i } else { b });
    for i in 0..2 {
        assert_eq!(argmax(wa.row(i)), argmax(wf.row(i)));
        assert!((wa.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(wa.row(i).iter().all(|&v| v > 0.0));
    }
}

#[test]
fn decode_one_hot_identical_and_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let hyps: Vec<Anchor> = (0..3).map(|_| random_anchor(&mut rng)).collect();
    let onehot = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let (raw, _) = decode_anchor(&[hyps.clone()], &onehot).unwrap();
    assert_eq!(raw[0], hyps[1]);

    let w = Tensor::new(&[1, 3], vec![0.2, 0.5, 0.3]).unwrap();
    let (raw, norm) = decode_anchor(&[vec![hyps[0]; 3]], &w).unwrap();
    assert!(close(&raw[0].to_array(), &hyps[0].to_array(), 1e-15));
    assert!(close(&norm[0].to_array(), &hyps[0].to_array(), 1e-15));

    let (a, b) = (hyps[0], hyps[2]);
    let half = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
    let (_, norm) = decode_anchor(&[vec![a, b]], &half).unwrap();
    let mut mid: Vec<f64> = a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x + y) / 2.0).collect();
    let n = mid[6].hypot(mid[7]);
    mid[6] /= n;
    mid[7] /= n;
    assert!(close(&norm[0].to_array(), &mid, 1e-14));
}

#[test]
fn zero_refinement_keeps_decoded_anchor() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = params(8, &ALL, 22);
    p.refine = Mlp::zeros(8, 8, 10);
    let decoded: Vec<Anchor> = (0..3).map(|_| random_anchor(&mut rng)).collect();
    let fused = Tensor::new(&[3, 16], (0..48).map(|_| rng.random()).collect()).unwrap();
    let (f, b) = mix_feature_anchor(&fused, &decoded, &p).unwrap();
    assert_eq!(b, decoded);
    assert_eq!(f.shape(), &[3, 8]);
}

#[test]
fn ffn_width_mismatch_is_config_error() {
    let mut p = params(8, &ALL, 23);
    p.ffn = Mlp::zeros(24, 16, 12);
    let fused = Tensor::zeros(&[1, 16]);
    let a = Anchor::new([0.0; 3], [1.0; 3], 0.0, [0.0; 2]);
    assert!(mix_feature_anchor(&fused, &[a], &p).is_err());
}

#[test]
fn mix_matches_manual_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let p = params(8, &ALL, 25);
    let decoded: Vec<Anchor> = (0..2).map(|_| random_anchor(&mut rng)).collect();
    let fused = Tensor::new(&[2, 16], (0..32).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let (f, b) = mix_feature_anchor(&fused, &decoded, &p).unwrap();
    for i in 0..2 {
        let mut x = embed_ref(&decoded[i], &p);
        x.extend_from_slice(fused.row(i));
        let q = mlp_ref(&x, &p.ffn);
        assert!(close(f.row(i), &q, 1e-12));
        let delta = mlp_ref(&q, &p.refine);
        let raw: Vec<f64> = decoded[i].to_array().iter().zip(&delta).map(|(a, d)| a + d).collect();
        let expect = yaw_normalize(&Anchor::from_slice(&raw).unwrap()).unwrap();
        assert!(close(&b[i].to_array(), &expect.to_array(), 1e-12));
    }
}

#[test]
fn fresh_zero_params_static_object() {
    let p = HatParameters::zeros(HatConfig::new(8, ALL.to_vec()).unwrap()).unwrap();
    let a = Anchor::new([2.0, -1.0, 0.3], [2.0, 4.0, 1.5], 0.2, [0.0, 0.0]);
    let bank = InstanceBank::new(vec![a], Tensor::zeros(&[1, 8])).unwrap();
    let r = align(&bank, 0.5, &EgoTransform::identity(), &p).unwrap();
    assert_eq!(r.anchors.len(), 1);
    let pre = r.anchors_pre_refine[0].to_array();
    for d in 0..10 {
        let lo = r.hypotheses[0].iter().map(|h| h.to_array()[d]).fold(f64::INFINITY, f64::min);
        let hi = r.hypotheses[0].iter().map(|h| h.to_array()[d]).fold(f64::NEG_INFINITY, f64::max);
        assert!(pre[d] >= lo - 1e-12 && pre[d] <= hi + 1e-12);
    }
    assert_eq!(r.anchors[0], yaw_normalize(&r.anchors_pre_refine[0]).unwrap());
}

#[test]
fn align_equals_step_by_step_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let p = params(8, &ALL, 27);
    let bank = random_bank(4, 8, &mut rng);
    let ego = random_ego(&mut rng);
    let r = align(&bank, 0.5, &ego, &p).unwrap();

    let hyps = generate_anchor_hypotheses(&bank, 0.5, &ego, &p).unwrap();
    let flat: Vec<Anchor> = hyps.iter().flatten().copied().collect();
    let embeds = encode_motion_embedding(&flat, &p).unwrap().reshape(&[4, 5, 8]).unwrap();
    let feats = build_feature_hypotheses(&embeds, &bank.queries).unwrap();
    let w = compute_dynamic_weights(&bank, &ego, &p).unwrap();
    let fused = fuse_features(&feats, &w, &p).unwrap();
    let wa = decode_anchor_weights(&w.feature, &p).unwrap();
    let (raw, decoded) = decode_anchor(&hyps, &wa).unwrap();
    let (f, b) = mix_feature_anchor(&fused, &decoded, &p).unwrap();

    assert_eq!(r.hypotheses, hyps);
    assert_eq!(r.anchor_weights, wa);
    assert_eq!(r.anchors_pre_refine, raw);
    assert_eq!(r.features, f);
    assert_eq!(r.anchors, b);
}

#[test]
fn single_model_pre_refine_is_warped_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for kind in ALL {
        let p = params(8, &[kind], 29);
        let bank = random_bank(3, 8, &mut rng);
        let ego = random_ego(&mut rng);
        let aug = build_augmented(&ego).unwrap();
        let r = align(&bank, 0.5, &ego, &p).unwrap();
        for (i, a) in bank.anchors.iter().enumerate() {
            let lat = decode_latents(bank.queries.row(i), &p.latent_head).unwrap();
            assert_eq!(r.anchors_pre_refine[i], warp_anchor(&predict(kind, a, 0.5, &lat).unwrap(), &aug));
        }
    }
}

#[test]
fn permuting_bank_permutes_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let p = params(8, &ALL, 31);
    let bank = random_bank(5, 8, &mut rng);
    let ego = random_ego(&mut rng);
    let perm = [2, 4, 0, 1, 3];
    let anchors = perm.iter().map(|&i| bank.anchors[i]).collect();
    let q = perm.iter().flat_map(|&i| bank.queries.row(i).to_vec()).collect();
    let permuted = InstanceBank::new(anchors, Tensor::new(&[5, 8], q).unwrap()).unwrap();
    let a = align(&bank, 0.5, &ego, &p).unwrap();
    let b = align(&permuted, 0.5, &ego, &p).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(b.anchors[j], a.anchors[i]);
        assert_eq!(b.anchors_pre_refine[j], a.anchors_pre_refine[i]);
        assert_eq!(b.features.row(j), a.features.row(i));
    }
}

#[test]
fn anchor_weight_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let p = params(8, &ALL, 33);
    let r = align(&random_bank(20, 8, &mut rng), 0.5, &random_ego(&mut rng), &p).unwrap();
    for i in 0..20 {
        let row = r.anchor_weights.row(i);
        assert!(row.iter().all(|&w| w > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn save_load_reproduces_align_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let p = params(8, &ALL, 35);
    let bank = random_bank(3, 8, &mut rng);
    let ego = random_ego(&mut rng);
    let mut buf = Vec::new();
    let prov = Provenance { tool_version: "t".into(), config_hash: "h".into(), seed: 35 };
    p.save(&mut buf, &prov).unwrap();
    let (q, _) = HatParameters::load(buf.as_slice()).unwrap();
    assert_eq!(align(&bank, 0.5, &ego, &p).unwrap(), align(&bank, 0.5, &ego, &q).unwrap());
}

#[test]
fn hull_holds_for_random_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for trial in 0..20 {
        let p = params(8, &ALL, 100 + trial);
        let r = align(&random_bank(25, 8, &mut rng), 0.5, &random_ego(&mut rng), &p).unwrap();
        for (pre, hyps) in r.anchors_pre_refine.iter().zip(&r.hypotheses) {
            let pre = pre.to_array();
            for d in 0..10 {
                let lo = hyps.iter().map(|h| h.to_array()[d]).fold(f64::INFINITY, f64::min);
                let hi = hyps.iter().map(|h| h.to_array()[d]).fold(f64::NEG_INFINITY, f64::max);
                assert!(pre[d] >= lo - 1e-12 && pre[d] <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn align_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let p = params(16, &ALL, 38);
    let mut bank = random_bank(2, 16, &mut rng);
    for a in &mut bank.anchors {
        a.position = [a.position[0] / 40.0, a.position[1] / 40.0, a.position[2]];
        a.velocity = [a.velocity[0] / 10.0, a.velocity[1] / 10.0];
    }
    let aug = build_augmented(&random_ego(&mut rng)).unwrap();
    let wa: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wf: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let tensors: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    let config = p.config.clone();
    let f = |g: &mut hat_core::tensor::Graph, vars: &[hat_core::tensor::Var]| {
        let to_t = |e: hat_core::hat::HatError| TensorError::Contract(e.to_string());
        let b = BoundHat::from_vars(&config, vars).map_err(to_t)?;
        let q = g.constant(bank.queries.clone());
        let v = b.forward(g, &bank.anchors, q, 0.5, &[aug]).map_err(to_t)?;
        let la = g.weighted_sum(v.anchors, wa.clone())?;
        let lf = g.weighted_sum(v.features, wf.clone())?;
        g.add(la, lf)
    };
    let report = grad_check(&tensors, &f).unwrap();
    assert!(report.max_rel_error <= 1e-4, "rel error {} in tensor {}", report.max_rel_error, report.worst_param);
    // Entrywise, allowing the ~1e-10 absolute noise of step-1e-5 differences.
    for (a, n) in report.analytic.iter().zip(&report.numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            assert!((x - y).abs() <= 1e-4 * x.abs().max(y.abs()) + 1e-9, "{x:e} vs {y:e}");
        }
    }
}
