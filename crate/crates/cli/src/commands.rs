use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hat_core::hat::io::Provenance;
use hat_core::motion::MotionModelKind;
use hat_core::sim::{
    evaluate, load_model, save_hat_model, save_implicit_model, scene_records, weight_report, EvalReport, HatModel,
    ImplicitModel, MethodSet, SavedModel, Split,
};
use serde::Serialize;
use serde_json::json;

use crate::artifacts::{self, csv_stamp, stamped_json, OutputLock};
use crate::checks::{self, Check};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiment::{benchmark, train_models};

pub const HAT_FILE: &str = "hat.hatp";
pub const HAT_SINGLE_FILE: &str = "hat-m1.hatp";
pub const IMPLICIT_FILE: &str = "implicit.hatp";
pub const LOSS_HEADER: &str = "model,epoch,loss";
pub const COMPARE_HEADER: &str = "method,all,cv,static,ca,ctrv,ctra,mean_yaw,mean_velocity_mps";

#[derive(Debug, Parser)]
#[command(name = "hat", version, about = "Multi-hypothesis anchor alignment experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON); defaults apply when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $HAT_OUTPUT_ROOT or ./hat-out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config's master seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// More progress output on stderr (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// No progress output
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the train and eval scenes as JSON lines
    Gen,
    /// Train HAT and the learned baselines
    Train,
    /// Evaluate every configured method on the eval scenes
    Eval,
    /// Side-by-side table from the last evaluation
    Compare,
    /// Per-regime anchor weights of the trained HAT
    Weights,
    /// Run the oracle suites
    Selftest,
}

struct Ctx {
    cfg: ExperimentConfig,
    prov: Provenance,
    out: PathBuf,
    level: u8,
}

impl Ctx {
    fn log(&self, msg: &str) {
        if self.level > 0 {
            eprintln!("hat: {msg}");
        }
    }

    fn debug(&self, msg: &str) {
        if self.level > 1 {
            eprintln!("hat: {msg}");
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::MissingInput(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let level = if cli.quiet { 0 } else { 1 + cli.verbose };
    if cli.command == Command::Selftest {
        return selftest(level);
    }
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let prov = artifacts::provenance(&cfg);
    let out = artifacts::output_dir(cli.out.as_deref());
    let _lock = OutputLock::acquire(&out)?;
    let ctx = Ctx { cfg, prov, out, level };
    ctx.debug(&format!("config sha256 {}", ctx.prov.config_hash));
    match cli.command {
        Command::Gen => gen(&ctx),
        Command::Train => train(&ctx),
        Command::Eval => eval(&ctx),
        Command::Compare => compare(&ctx),
        Command::Weights => weights(&ctx),
        Command::Selftest => unreachable!("handled above"),
    }
}

fn write(ctx: &Ctx, name: &str, body: &[u8]) -> Result<(), CliError> {
    let path = artifacts::write(&ctx.out, name, body)?;
    ctx.log(&format!("wrote {}", path.display()));
    Ok(())
}

fn scenes_jsonl(ctx: &Ctx, split: &Split) -> String {
    let mut s = serde_json::to_string(&json!({ "provenance": ctx.prov })).expect("json");
    s.push('\n');
    for (i, (scene, obs)) in split.scenes.iter().zip(&split.observed).enumerate() {
        for r in scene_records(i, scene, obs) {
            s.push_str(&serde_json::to_string(&r).expect("record serializes"));
            s.push('\n');
        }
    }
    s
}

fn gen(ctx: &Ctx) -> Result<(), CliError> {
    let bench = benchmark(&ctx.cfg)?;
    write(ctx, "scenes-train.jsonl", scenes_jsonl(ctx, &bench.train).as_bytes())?;
    write(ctx, "scenes-eval.jsonl", scenes_jsonl(ctx, &bench.eval).as_bytes())
}

fn save(ctx: &Ctx, name: &str, save: impl FnOnce(&mut Vec<u8>) -> Result<(), hat_core::sim::SimError>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    save(&mut buf)?;
    write(ctx, name, &buf)
}

fn train(ctx: &Ctx) -> Result<(), CliError> {
    let bench = benchmark(&ctx.cfg)?;
    let log = |m: &str| ctx.log(m);
    let trained = train_models(&ctx.cfg, &bench, &log)?;
    save(ctx, HAT_FILE, |b| save_hat_model(b, &trained.hat, &ctx.prov))?;
    if let Some(m) = &trained.hat_single {
        save(ctx, HAT_SINGLE_FILE, |b| save_hat_model(b, m, &ctx.prov))?;
    }
    if let Some(m) = &trained.implicit {
        save(ctx, IMPLICIT_FILE, |b| save_implicit_model(b, m, &ctx.prov))?;
    }
    let mut csv = csv_stamp(&ctx.prov);
    csv.push_str(LOSS_HEADER);
    csv.push('\n');
    for (name, curve) in &trained.curves {
        for (e, l) in curve.iter().enumerate() {
            csv.push_str(&format!("{name},{e},{l:.12e}\n"));
        }
    }
    write(ctx, "loss.csv", csv.as_bytes())
}

fn load(ctx: &Ctx, name: &str) -> Result<SavedModel, CliError> {
    let path = ctx.out.join(name);
    let f = File::open(&path).map_err(|e| CliError::MissingInput(format!("{}: {e} (run `hat train` first)", path.display())))?;
    let (model, p) = load_model(BufReader::new(f))?;
    artifacts::check_provenance(&p, &ctx.prov, name)?;
    Ok(model)
}

fn load_hat(ctx: &Ctx, name: &str) -> Result<HatModel, CliError> {
    match load(ctx, name)? {
        SavedModel::Hat(m) => Ok(m),
        SavedModel::Implicit(_) => Err(CliError::Validation(format!("{name} holds an implicit model, not HAT"))),
    }
}

fn load_implicit(ctx: &Ctx) -> Result<ImplicitModel, CliError> {
    match load(ctx, IMPLICIT_FILE)? {
        SavedModel::Implicit(m) => Ok(m),
        SavedModel::Hat(_) => Err(CliError::Validation(format!("{IMPLICIT_FILE} holds a HAT model"))),
    }
}

fn eval(ctx: &Ctx) -> Result<(), CliError> {
    let hat = load_hat(ctx, HAT_FILE)?;
    let single = ctx.cfg.baselines.hat_single.then(|| load_hat(ctx, HAT_SINGLE_FILE)).transpose()?;
    let implicit = ctx.cfg.baselines.implicit.then(|| load_implicit(ctx)).transpose()?;
    let bench = benchmark(&ctx.cfg)?;
    let b = &ctx.cfg.baselines;
    let methods = MethodSet {
        hat: Some(&hat),
        hat_single: single.as_ref(),
        single: b.single.clone(),
        implicit: implicit.as_ref(),
        imm: b.imm.then(|| (b.filter.clone(), ctx.cfg.noise)),
    };
    ctx.log("evaluating");
    let report = evaluate(&bench.eval.scenes, &bench.eval.observed, &methods)?;
    let mut csv = csv_stamp(&ctx.prov);
    csv.push_str(&report.to_csv());
    write(ctx, "eval.csv", csv.as_bytes())?;
    write(ctx, "eval.json", stamped_json(&ctx.prov, "report", &report).as_bytes())?;
    // wall-clock timings differ between runs, so they live apart from the
    // reproducible report
    write(ctx, "latency.json", stamped_json(&ctx.prov, "latency", &report.latency).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: String,
    /// mean translation error, overall then per regime (absent when a
    /// regime has no frames)
    pub translation: Vec<Option<f64>>,
    pub mean_yaw: f64,
    pub mean_velocity: f64,
}

pub fn compare_rows(report: &EvalReport) -> Vec<CompareRow> {
    let mut methods: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let regimes: Vec<&str> = std::iter::once("all").chain(MotionModelKind::ALL.iter().map(|k| k.name())).collect();
    methods
        .into_iter()
        .map(|m| {
            let find = |reg: &str| report.rows.iter().find(|r| r.method == m && r.regime == reg);
            let all = find("all").expect("every method has an overall row");
            CompareRow {
                method: m.to_string(),
                translation: regimes.iter().map(|r| find(r).map(|x| x.stats.mean_translation)).collect(),
                mean_yaw: all.stats.mean_yaw,
                mean_velocity: all.stats.mean_velocity,
            }
        })
        .collect()
}

fn compare(ctx: &Ctx) -> Result<(), CliError> {
    let path = ctx.out.join("eval.json");
    let (p, v) = artifacts::read_stamped_json(&path, "report")?;
    artifacts::check_provenance(&p, &ctx.prov, "eval.json")?;
    let report: EvalReport = serde_json::from_value(v).map_err(|e| CliError::Validation(format!("eval.json: {e}")))?;
    let rows = compare_rows(&report);
    let mut csv = csv_stamp(&ctx.prov);
    csv.push_str(COMPARE_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.method);
        for t in &r.translation {
            match t {
                Some(v) => csv.push_str(&format!(",{v:.9}")),
                None => csv.push(','),
            }
        }
        csv.push_str(&format!(",{:.9},{:.9}\n", r.mean_yaw, r.mean_velocity));
    }
    write(ctx, "compare.csv", csv.as_bytes())?;
    write(ctx, "compare.json", stamped_json(&ctx.prov, "methods", &rows).as_bytes())
}

fn weights(ctx: &Ctx) -> Result<(), CliError> {
    let hat = load_hat(ctx, HAT_FILE)?;
    let bench = benchmark(&ctx.cfg)?;
    let report = weight_report(&bench.eval.scenes, &bench.eval.observed, &hat)?;
    let mut csv = csv_stamp(&ctx.prov);
    csv.push_str(&report.to_csv());
    write(ctx, "weights.csv", csv.as_bytes())?;
    let tm = [MotionModelKind::Ctrv, MotionModelKind::Ctra];
    let summary = json!({
        "report": report,
        "turning_mass_in_turning_frames": report.mass(&tm, MotionModelKind::is_turning),
        "turning_mass_in_linear_frames": report.mass(&tm, MotionModelKind::is_linear),
        "turning_contrast": report.turning_contrast(),
    });
    write(ctx, "weights.json", stamped_json(&ctx.prov, "weights", &summary).as_bytes())
}

/// Reduced-size versions of the acceptance oracles.
pub fn selftest_checks() -> Vec<Check> {
    let (grad, control) = checks::gradient(7);
    let (imm_ratio, imm_delay) = checks::imm(20);
    vec![
        checks::kinematics(200, 1),
        checks::degeneracy(200, 2),
        checks::warp_roundtrip(200, 3),
        checks::hull(1000, 4),
        grad,
        control,
        imm_ratio,
        imm_delay,
    ]
}

fn selftest(level: u8) -> Result<(), CliError> {
    let results = selftest_checks();
    if level > 0 {
        for c in &results {
            eprintln!("{}", c.line());
        }
    }
    let passed = results.iter().all(|c| c.passed);
    let summary = json!({ "tool_version": artifacts::tool_version(), "passed": passed, "suites": results });
    println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = results.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(CliError::Numerical(format!("self-test failed: {}", failed.join(", "))))
    }
}
