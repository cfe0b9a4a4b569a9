use rand::Rng;

use super::{HatConfig, HatError};
use crate::motion::{BoundLatentHead, LatentHead};
use crate::tensor::{
    BoundLayerNorm, BoundLinear, BoundMlp, Graph, LayerNormLayer, LinearLayer, Mlp, Tensor, Var,
    LAYER_NORM_EPS,
};

/// Φ_P, Φ_D, Φ_Θ, Φ_V. Each maps its slice of the anchor to `C/4` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEncoders {
    pub position: Mlp,
    pub size: Mlp,
    pub yaw: Mlp,
    pub velocity: Mlp,
}

impl StateEncoders {
    fn build(channels: usize, mut make: impl FnMut(usize, usize, usize) -> Mlp) -> Self {
        let q = channels / 4;
        Self { position: make(3, q, q), size: make(3, q, q), yaw: make(2, q, q), velocity: make(2, q, q) }
    }

    pub fn all(&self) -> [&Mlp; 4] {
        [&self.position, &self.size, &self.yaw, &self.velocity]
    }

    fn all_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.position, &mut self.size, &mut self.yaw, &mut self.velocity]
    }

    pub fn output_dim(&self) -> usize {
        self.all().iter().map(|m| m.output_dim()).sum()
    }
}

/// Every learned block of the aligner.
#[derive(Debug, Clone, PartialEq)]
pub struct HatParameters {
    pub config: HatConfig,
    pub encoders: StateEncoders,
    /// `L_c`: `2C → (2C)²`
    pub channel_fusion: LinearLayer,
    /// `L_f`: `2C → M`
    pub feature_fusion: LinearLayer,
    /// `L_a`: scalar map applied to each entry of `W_f`
    pub anchor_weight: LinearLayer,
    pub norm_channel: LayerNormLayer,
    pub norm_feature: LayerNormLayer,
    /// `3C → 2C → C`
    pub ffn: Mlp,
    /// `Φ_r`: `C → C → 10`
    pub refine: Mlp,
    pub latent_head: LatentHead,
}

impl HatParameters {
    pub fn init(config: HatConfig, rng: &mut impl Rng) -> Result<Self, HatError> {
        config.validate()?;
        let c = config.channels;
        let m = config.models.len();
        let encoders = StateEncoders::build(c, |i, h, o| Mlp::init(i, h, o, &mut *rng));
        Ok(Self {
            encoders,
            channel_fusion: LinearLayer::init(2 * c, 4 * c * c, rng),
            feature_fusion: LinearLayer::init(2 * c, m, rng),
            anchor_weight: LinearLayer::init(1, 1, rng),
            norm_channel: LayerNormLayer::new(2 * c),
            norm_feature: LayerNormLayer::new(2 * c),
            ffn: Mlp::init(3 * c, 2 * c, c, rng),
            refine: Mlp::init(c, c, 10, rng),
            latent_head: LatentHead::init(c, rng),
            config,
        })
    }

    /// All weights and biases zero; layer norms at unit gain.
    pub fn zeros(config: HatConfig) -> Result<Self, HatError> {
        config.validate()?;
        let c = config.channels;
        let m = config.models.len();
        Ok(Self {
            encoders: StateEncoders::build(c, Mlp::zeros),
            channel_fusion: LinearLayer::zeros(2 * c, 4 * c * c),
            feature_fusion: LinearLayer::zeros(2 * c, m),
            anchor_weight: LinearLayer::zeros(1, 1),
            norm_channel: LayerNormLayer::new(2 * c),
            norm_feature: LayerNormLayer::new(2 * c),
            ffn: Mlp::zeros(3 * c, 2 * c, c),
            refine: Mlp::zeros(c, c, 10),
            latent_head: LatentHead::zeros(c),
            config,
        })
    }

    fn mlp_names(prefix: &str) -> [String; 4] {
        ["first.weight", "first.bias", "second.weight", "second.bias"].map(|s| format!("{prefix}.{s}"))
    }

    /// Stable names for every tensor, in binding order.
    pub fn tensor_names() -> Vec<String> {
        let mut names = Vec::new();
        for enc in ["position", "size", "yaw", "velocity"] {
            names.extend(Self::mlp_names(&format!("encoder.{enc}")));
        }
        for lin in ["channel_fusion", "feature_fusion", "anchor_weight"] {
            names.push(format!("{lin}.weight"));
            names.push(format!("{lin}.bias"));
        }
        for ln in ["norm_channel", "norm_feature"] {
            names.push(format!("{ln}.gain"));
            names.push(format!("{ln}.shift"));
        }
        names.extend(Self::mlp_names("ffn"));
        names.extend(Self::mlp_names("refine"));
        names.extend(Self::mlp_names("latent_head"));
        names
    }

    /// Tensors in binding order (matches [`HatParameters::tensor_names`]).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for e in self.encoders.all() {
            out.extend(e.tensors());
        }
        out.extend(self.channel_fusion.tensors());
        out.extend(self.feature_fusion.tensors());
        out.extend(self.anchor_weight.tensors());
        out.extend(self.norm_channel.tensors());
        out.extend(self.norm_feature.tensors());
        out.extend(self.ffn.tensors());
        out.extend(self.refine.tensors());
        out.extend(self.latent_head.mlp.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for e in self.encoders.all_mut() {
            out.extend(e.tensors_mut());
        }
        out.extend(self.channel_fusion.tensors_mut());
        out.extend(self.feature_fusion.tensors_mut());
        out.extend(self.anchor_weight.tensors_mut());
        out.extend(self.norm_channel.tensors_mut());
        out.extend(self.norm_feature.tensors_mut());
        out.extend(self.ffn.tensors_mut());
        out.extend(self.refine.tensors_mut());
        out.extend(self.latent_head.mlp.tensors_mut());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundHat {
        let [p, d, y, v] = self.encoders.all().map(|m| m.bind(g, trainable));
        BoundHat {
            encoders: [p, d, y, v],
            channel_fusion: self.channel_fusion.bind(g, trainable),
            feature_fusion: self.feature_fusion.bind(g, trainable),
            anchor_weight: self.anchor_weight.bind(g, trainable),
            norm_channel: self.norm_channel.bind(g, trainable),
            norm_feature: self.norm_feature.bind(g, trainable),
            ffn: self.ffn.bind(g, trainable),
            refine: self.refine.bind(g, trainable),
            head: self.latent_head.bind(g, trainable),
            config: self.config.clone(),
        }
    }

    /// Replaces tensor values from `(name, tensor)` pairs; every name must
    /// be present with the expected shape.
    pub fn assign_named(&mut self, named: &[(String, Tensor)]) -> Result<(), HatError> {
        let names = Self::tensor_names();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| HatError::Format(format!("missing tensor '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(HatError::Format(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

/// [`HatParameters`] placed on a graph.
#[derive(Debug, Clone)]
pub struct BoundHat {
    pub encoders: [BoundMlp; 4],
    pub channel_fusion: BoundLinear,
    pub feature_fusion: BoundLinear,
    pub anchor_weight: BoundLinear,
    pub norm_channel: BoundLayerNorm,
    pub norm_feature: BoundLayerNorm,
    pub ffn: BoundMlp,
    pub refine: BoundMlp,
    pub head: BoundLatentHead,
    pub config: HatConfig,
}

impl BoundHat {
    /// Rebuilds the binding from vars already on a graph, in
    /// [`HatParameters::tensor_names`] order.
    pub fn from_vars(config: &HatConfig, vars: &[Var]) -> Result<Self, HatError> {
        let expected = HatParameters::tensor_names().len();
        if vars.len() != expected {
            return Err(HatError::Config(format!("{} vars, expected {expected}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let mut lin = || BoundLinear { weight: next(), bias: next() };
        let mut mlps = Vec::new();
        for _ in 0..4 {
            mlps.push(BoundMlp { first: lin(), second: lin() });
        }
        let channel_fusion = lin();
        let feature_fusion = lin();
        let anchor_weight = lin();
        let mut ln = |_: ()| {
            let l = lin();
            BoundLayerNorm { gain: l.weight, shift: l.bias, epsilon: LAYER_NORM_EPS }
        };
        let norm_channel = ln(());
        let norm_feature = ln(());
        let mut mlp = || BoundMlp { first: lin(), second: lin() };
        let ffn = mlp();
        let refine = mlp();
        let head = BoundLatentHead { mlp: mlp() };
        Ok(Self {
            encoders: [mlps[0], mlps[1], mlps[2], mlps[3]],
            channel_fusion,
            feature_fusion,
            anchor_weight,
            norm_channel,
            norm_feature,
            ffn,
            refine,
            head,
            config: config.clone(),
        })
    }
}
