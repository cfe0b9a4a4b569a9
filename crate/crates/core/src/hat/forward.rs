//! Graph-level pieces of the aligner. The public data-level operations and
//! [`super::align`] are thin wrappers around these, so both paths execute
//! identical arithmetic.

use super::params::BoundHat;
use super::HatError;
use crate::geometry::{Anchor, AugmentedTransform, ANCHOR_DIM, MIN_YAW_NORM};
use crate::motion::{predict_with_jacobian, LatentKinematics, LATENT_DIM};
use crate::tensor::{Graph, Tensor, Var, ACTIVATION};

/// Fixed input scaling of the anchor slices before the state encoders.
pub const EMBED_INPUT_SCALE: [f64; ANCHOR_DIM] = [0.02, 0.02, 0.02, 0.2, 0.2, 0.2, 1.0, 1.0, 0.1, 0.1];

const SLICES: [(usize, usize); 4] = [(0, 3), (3, 3), (6, 2), (8, 2)];

/// Graph handles of every intermediate of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AlignVars {
    /// `[N, 4]`
    pub latents: Var,
    /// `[N, M, 10]`
    pub hypotheses: Var,
    /// `[N, M, 2C]`
    pub feature_hypotheses: Var,
    /// `[N, 2C, 2C]`
    pub channel_weights: Var,
    /// `[N, 1, M]`
    pub feature_weights: Var,
    /// `[N, 2C]`
    pub fused: Var,
    /// `[N, M]`
    pub anchor_weights: Var,
    /// `[N, 10]` convex combination before yaw normalisation
    pub combined: Var,
    /// `[N, 10]`
    pub decoded: Var,
    /// `[N, C]`
    pub features: Var,
    /// `[N, 10]`
    pub anchors: Var,
}

pub(crate) fn check_yaw_rows(g: &Graph, x: Var) -> Result<(), HatError> {
    for (instance, row) in g.value(x).data().chunks(ANCHOR_DIM).enumerate() {
        let norm = row[6].hypot(row[7]);
        if !(norm > MIN_YAW_NORM) {
            return Err(HatError::DegenerateYaw { instance, norm });
        }
    }
    Ok(())
}

pub(crate) fn anchors_tensor(anchors: &[Anchor]) -> Tensor {
    let data = anchors.iter().flat_map(|a| a.to_array()).collect();
    Tensor::new(&[anchors.len(), ANCHOR_DIM], data).expect("anchor rows")
}

impl BoundHat {
    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn hypothesis_count(&self) -> usize {
        self.config.models.len()
    }

    /// `[N, C]` queries → `[N, 4]` bounded latents.
    pub fn latents(&self, g: &mut Graph, queries: Var) -> Result<Var, HatError> {
        Ok(self.head.forward(g, queries)?)
    }

    /// Warped per-model predictions `[N, M, 10]`, differentiable w.r.t.
    /// the latents. `augs` holds one transform per row or a single shared one.
    pub fn hypotheses(
        &self,
        g: &mut Graph,
        anchors: &[Anchor],
        latents: Var,
        dt: f64,
        augs: &[AugmentedTransform],
    ) -> Result<Var, HatError> {
        let n = anchors.len();
        if augs.len() != n && augs.len() != 1 {
            return Err(HatError::Config(format!("{} transforms for {n} anchors", augs.len())));
        }
        let m = self.hypothesis_count();
        let lat = g.value(latents).data().to_vec();
        let mut value = Vec::with_capacity(n * m * ANCHOR_DIM);
        let mut jac = Vec::with_capacity(n * m * ANCHOR_DIM * LATENT_DIM);
        for (i, a) in anchors.iter().enumerate() {
            let aug = &augs[if augs.len() == 1 { 0 } else { i }];
            let l = LatentKinematics::from_array(std::array::from_fn(|k| lat[i * LATENT_DIM + k]));
            for &kind in &self.config.models {
                let (pred, dpred) = predict_with_jacobian(kind, a, dt, &l)?;
                value.extend(aug.apply_array(&pred));
                let mut block = [[0.0; LATENT_DIM]; ANCHOR_DIM];
                for k in 0..LATENT_DIM {
                    let col = aug.rotate_array(&std::array::from_fn(|r| dpred[r][k]));
                    for r in 0..ANCHOR_DIM {
                        block[r][k] = col[r];
                    }
                }
                jac.extend(block.iter().flatten());
            }
        }
        let value = Tensor::new(&[n, m * ANCHOR_DIM], value)?;
        let flat = g.row_jacobian(latents, value, jac)?;
        Ok(g.reshape(flat, &[n, m, ANCHOR_DIM])?)
    }

    /// `[..., 10]` → `[..., C]` as `concat(Φ_P(P), Φ_D(D), Φ_Θ(Θ), Φ_V(V))`.
    pub fn embed(&self, g: &mut Graph, anchors: Var) -> Result<Var, HatError> {
        let scaled = g.scale_cols(anchors, &EMBED_INPUT_SCALE)?;
        let mut parts = Vec::with_capacity(4);
        for (enc, (start, len)) in self.encoders.iter().zip(SLICES) {
            let s = g.slice_last(scaled, start, len)?;
            parts.push(enc.forward(g, s)?);
        }
        let axis = g.shape(anchors).len() - 1;
        Ok(g.concat(&parts, axis)?)
    }

    /// `[N, M, C]` embeddings and `[N, C]` queries → `[N, M, 2C]`.
    pub fn feature_hypotheses(&self, g: &mut Graph, embeds: Var, queries: Var) -> Result<Var, HatError> {
        build_feature_hypotheses_var(g, embeds, queries)
    }

    /// Conditioning on the ego-warped historical anchors `[N, 10]`:
    /// returns `W_c` `[N, 2C, 2C]` and `W_f` `[N, 1, M]`.
    pub fn dynamic_weights(&self, g: &mut Graph, warped: Var, queries: Var) -> Result<(Var, Var), HatError> {
        let n = g.shape(warped)[0];
        let c2 = 2 * self.channels();
        let e = self.embed(g, warped)?;
        let cond = g.concat(&[e, queries], 1)?;
        let wc = self.channel_fusion.forward(g, cond)?;
        let wc = g.reshape(wc, &[n, c2, c2])?;
        let wf = self.feature_fusion.forward(g, cond)?;
        let wf = g.reshape(wf, &[n, 1, self.hypothesis_count()])?;
        Ok((wc, wf))
    }

    /// `σ(LN(W_f ⊗ σ(LN(hyps ⊗ W_c))))` → `[N, 2C]`.
    pub fn fuse(&self, g: &mut Graph, hyps: Var, wc: Var, wf: Var) -> Result<Var, HatError> {
        let n = g.shape(hyps)[0];
        let mixed = g.matmul(hyps, wc)?;
        let mixed = self.norm_channel.forward(g, mixed)?;
        let mixed = ACTIVATION.apply(g, mixed);
        let pooled = g.matmul(wf, mixed)?;
        let pooled = self.norm_feature.forward(g, pooled)?;
        let pooled = ACTIVATION.apply(g, pooled);
        Ok(g.reshape(pooled, &[n, 2 * self.channels()])?)
    }

    /// `softmax(L_a(W_f))` over the hypothesis axis → `[N, M]`.
    pub fn anchor_weights(&self, g: &mut Graph, wf: Var) -> Result<Var, HatError> {
        let (n, m) = (g.shape(wf)[0], self.hypothesis_count());
        let col = g.reshape(wf, &[n, m, 1])?;
        let logits = self.anchor_weight.forward(g, col)?;
        let logits = g.reshape(logits, &[n, m])?;
        Ok(g.softmax(logits, 1)?)
    }

    /// `(convex combination, yaw-normalised anchor)`, both `[N, 10]`.
    pub fn decode(&self, g: &mut Graph, hyps: Var, wa: Var) -> Result<(Var, Var), HatError> {
        decode_var(g, hyps, wa)
    }

    /// `Q = FFN(concat(embed(b̄), Q̄))`, `B = normalize(b̄ + Φ_r(Q))`.
    pub fn mix(&self, g: &mut Graph, fused: Var, decoded: Var) -> Result<(Var, Var), HatError> {
        let e = self.embed(g, decoded)?;
        let x = g.concat(&[e, fused], 1)?;
        let q = self.ffn.forward(g, x)?;
        let delta = self.refine.forward(g, q)?;
        let b = g.add(decoded, delta)?;
        check_yaw_rows(g, b)?;
        let b = g.yaw_normalize(b)?;
        Ok((q, b))
    }

    /// Full pass in algorithm order.
    pub fn forward(
        &self,
        g: &mut Graph,
        anchors: &[Anchor],
        queries: Var,
        dt: f64,
        augs: &[AugmentedTransform],
    ) -> Result<AlignVars, HatError> {
        let n = anchors.len();
        if g.shape(queries) != [n, self.channels()] {
            return Err(HatError::Config(format!(
                "queries have shape {:?}, expected [{n}, {}]",
                g.shape(queries),
                self.channels()
            )));
        }
        let latents = self.latents(g, queries)?;
        let hypotheses = self.hypotheses(g, anchors, latents, dt, augs)?;
        let embeds = self.embed(g, hypotheses)?;
        let feature_hypotheses = self.feature_hypotheses(g, embeds, queries)?;
        let warped: Vec<Anchor> = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| Anchor::from_array(&augs[if augs.len() == 1 { 0 } else { i }].apply_array(&a.to_array())))
            .collect();
        let warped = g.constant(anchors_tensor(&warped));
        let (channel_weights, feature_weights) = self.dynamic_weights(g, warped, queries)?;
        let fused = self.fuse(g, feature_hypotheses, channel_weights, feature_weights)?;
        let anchor_weights = self.anchor_weights(g, feature_weights)?;
        let (combined, decoded) = self.decode(g, hypotheses, anchor_weights)?;
        let (features, anchors) = self.mix(g, fused, decoded)?;
        Ok(AlignVars {
            latents,
            hypotheses,
            feature_hypotheses,
            channel_weights,
            feature_weights,
            fused,
            anchor_weights,
            combined,
            decoded,
            features,
            anchors,
        })
    }
}

pub(crate) fn build_feature_hypotheses_var(g: &mut Graph, embeds: Var, queries: Var) -> Result<Var, HatError> {
    let (es, qs) = (g.shape(embeds).to_vec(), g.shape(queries).to_vec());
    if es.len() != 3 || qs.len() != 2 || es[0] != qs[0] {
        return Err(HatError::Config(format!("feature hypotheses: embeds {es:?}, queries {qs:?}")));
    }
    let q = g.repeat(queries, 1, es[1])?;
    Ok(g.concat(&[embeds, q], 2)?)
}

pub(crate) fn decode_var(g: &mut Graph, hyps: Var, wa: Var) -> Result<(Var, Var), HatError> {
    let (n, m) = (g.shape(hyps)[0], g.shape(hyps)[1]);
    if g.shape(wa) != [n, m] {
        return Err(HatError::Config(format!("anchor weights {:?} for {n}x{m} hypotheses", g.shape(wa))));
    }
    let w = g.reshape(wa, &[n, 1, m])?;
    let combined = g.matmul(w, hyps)?;
    let combined = g.reshape(combined, &[n, ANCHOR_DIM])?;
    check_yaw_rows(g, combined)?;
    let decoded = g.yaw_normalize(combined)?;
    Ok((combined, decoded))
}
