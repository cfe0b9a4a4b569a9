//! The pipeline shared by the commands: benchmark generation, training of
//! the learned methods and assembly of the evaluated method set.

use hat_core::hat::HatConfig;
use hat_core::motion::MotionModelKind;
use hat_core::sim::{
    build_samples, stream_rng, train, Benchmark, HatModel, ImplicitModel, MethodSet, TrainReport,
};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const HAT_STREAM: u64 = 2;
pub const HAT_SINGLE_STREAM: u64 = 3;
pub const IMPLICIT_STREAM: u64 = 4;

pub fn benchmark(cfg: &ExperimentConfig) -> Result<Benchmark, CliError> {
    Ok(Benchmark::generate(&cfg.scene, &cfg.noise, cfg.train_scenes, cfg.eval_scenes, cfg.seed)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub hat: HatModel,
    pub hat_single: Option<HatModel>,
    pub implicit: Option<ImplicitModel>,
    /// (method name, loss curve) in training order
    pub curves: Vec<(String, Vec<f64>)>,
}

impl Trained {
    pub fn methods(&self, cfg: &ExperimentConfig) -> MethodSet<'_> {
        MethodSet {
            hat: Some(&self.hat),
            hat_single: self.hat_single.as_ref(),
            single: cfg.baselines.single.clone(),
            implicit: self.implicit.as_ref(),
            imm: cfg.baselines.imm.then(|| (cfg.baselines.filter.clone(), cfg.noise)),
        }
    }
}

/// Trains HAT and, as configured, the single-hypothesis HAT and the
/// implicit aligner on the training split.
pub fn train_models(cfg: &ExperimentConfig, bench: &Benchmark, log: &dyn Fn(&str)) -> Result<Trained, CliError> {
    let set = build_samples(&bench.train.scenes, &bench.train.observed)?;
    let opts = &cfg.training;
    let seed = opts.seed;
    let mut curves = Vec::new();
    let mut fit_hat = |name: &str, config: HatConfig, stream: u64| -> Result<HatModel, CliError> {
        log(&format!("training {name} on {} samples", set.len()));
        let mut m = HatModel::init(config, &mut stream_rng(seed, stream))?;
        let TrainReport { loss_curve } = train(&mut m, &set, opts)?;
        curves.push((name.to_string(), loss_curve));
        Ok(m)
    };
    let hat = fit_hat("hat", cfg.hat_config()?, HAT_STREAM)?;
    let hat_single = if cfg.baselines.hat_single {
        let single = HatConfig::new(cfg.model.channels, vec![MotionModelKind::Cv]).map_err(|e| CliError::Validation(e.to_string()))?;
        Some(fit_hat("hat-m1", single, HAT_SINGLE_STREAM)?)
    } else {
        None
    };
    let implicit = if cfg.baselines.implicit {
        log(&format!("training implicit on {} samples", set.len()));
        let mut m = ImplicitModel::init(cfg.model.channels, &mut stream_rng(seed, IMPLICIT_STREAM));
        curves.push(("implicit".into(), train(&mut m, &set, opts)?.loss_curve));
        Some(m)
    } else {
        None
    };
    Ok(Trained { hat, hat_single, implicit, curves })
}
