use rand::Rng;

use super::{LatentKinematics, LATENT_BOUND};
use crate::tensor::{BoundMlp, Graph, Mlp, Result, Tensor, Var};

/// `[ax, ay, a, ω]`
pub const LATENT_DIM: usize = 4;

/// Query → latent kinematics: two linear layers, the hidden activation, and
/// a `0.1·tanh` squashing so outputs never leave the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentHead {
    pub mlp: Mlp,
}

impl LatentHead {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::init(channels, channels, LATENT_DIM, rng) }
    }

    pub fn zeros(channels: usize) -> Self {
        Self { mlp: Mlp::zeros(channels, channels, LATENT_DIM) }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLatentHead {
        BoundLatentHead { mlp: self.mlp.bind(g, trainable) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLatentHead {
    pub mlp: BoundMlp,
}

impl BoundLatentHead {
    /// `[N, C]` queries → `[N, 4]` bounded latents.
    pub fn forward(&self, g: &mut Graph, queries: Var) -> Result<Var> {
        let raw = self.mlp.forward(g, queries)?;
        let t = g.tanh(raw);
        Ok(g.scale(t, LATENT_BOUND))
    }
}

pub fn decode_latents(query: &[f64], head: &LatentHead) -> Result<LatentKinematics> {
    let mut g = Graph::new();
    let q = g.constant(Tensor::new(&[1, query.len()], query.to_vec())?);
    let bound = head.bind(&mut g, false);
    let out = bound.forward(&mut g, q)?;
    let v = g.value(out).data();
    Ok(LatentKinematics::from_array([v[0], v[1], v[2], v[3]]))
}
