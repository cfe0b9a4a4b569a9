//! Train/eval scene splits derived from one seed.

use super::observe::{observe, NoiseConfig, ObservedScene};
use super::scene::{generate_scenes, scene_seed, Scene, SceneConfig};
use super::SimError;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub scenes: Vec<Scene>,
    pub observed: Vec<ObservedScene>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Split,
    pub eval: Split,
}

fn split(cfg: &SceneConfig, noise: &NoiseConfig, count: usize, scene: u64, obs: u64) -> Result<Split, SimError> {
    let scenes = generate_scenes(cfg, count, scene)?;
    let observed = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| observe(s, noise, scene_seed(obs, i)))
        .collect::<Result<_, _>>()?;
    Ok(Split { scenes, observed })
}

impl Benchmark {
    /// Scenes and observations of both splits come from independent
    /// sub-seeds of `seed`.
    pub fn generate(
        cfg: &SceneConfig,
        noise: &NoiseConfig,
        train_scenes: usize,
        eval_scenes: usize,
        seed: u64,
    ) -> Result<Self, SimError> {
        noise.validate()?;
        let sub = |k| scene_seed(seed, k);
        Ok(Self {
            train: split(cfg, noise, train_scenes, sub(0), sub(1))?,
            eval: split(cfg, noise, eval_scenes, sub(2), sub(3))?,
        })
    }
}
