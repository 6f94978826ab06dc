//! The `caw` command line.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
//! 4 I/O or file-format error, 5 gradient check failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::attacks::{attack, AttackConfig, AttackKind};
use crate::config::{train_config_digest, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{ablation_csv, evaluate, run_ablation, AblationArm};
use crate::gradcheck::run_gradcheck;
use crate::losses::CawConfig;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, DualEncoderModel};
use crate::training::{fit_with, TrainLogRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "caw", version, about = "Confidence-aware adversarial fine-tuning on synthetic zero-shot tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain, snapshot the frozen encoder, then fine-tune adversarially.
    Train(CommandArgs),
    /// Clean and robust accuracy of a checkpoint.
    Eval(CommandArgs),
    /// Attack a checkpoint and emit one JSON line per sample.
    Attack(CommandArgs),
    /// Train the CE, +CA and +Reg arms from one snapshot and compare them.
    Ablate(CommandArgs),
    /// Compare every loss gradient with central finite differences.
    Gradcheck(CommandArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommandArgs {
    /// JSON run configuration; defaults apply to every missing field.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` and `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long)]
    pub json: bool,
    /// Checkpoint to load for eval/attack (default: <out>/checkpoint.cawm).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Attack budget: the inner attack for train/ablate, every attack for eval/attack.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long = "step-size")]
    pub step_size: Option<f64>,
    #[arg(long, value_parser = ["fgsm", "pgd", "cw"])]
    pub attack: Option<String>,
    #[arg(long = "random-start")]
    pub random_start: bool,
    /// Random states per component for gradcheck.
    #[arg(long)]
    pub states: Option<usize>,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

impl CommandArgs {
    fn patch_attack(&self, a: &mut AttackConfig) -> Result<()> {
        if let Some(k) = &self.attack {
            a.kind = k.parse::<AttackKind>()?;
        }
        if let Some(e) = self.eps {
            a.epsilon = e;
            if self.step_size.is_none() {
                a.step_size = e;
            }
        }
        if let Some(s) = self.steps {
            a.steps = s;
        }
        if let Some(s) = self.step_size {
            a.step_size = s;
        }
        if self.random_start {
            a.random_start = true;
        }
        Ok(())
    }

    fn touches_attack(&self) -> bool {
        self.attack.is_some() || self.eps.is_some() || self.steps.is_some() || self.step_size.is_some() || self.random_start
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Domain(_) => "domain",
        Error::Contract(_) => "contract",
        Error::GraphConsumed => "graph_consumed",
        Error::Numeric(_) => "numeric",
        Error::Config(_) => "config",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let json = match &cli.command {
        Command::Train(a) | Command::Eval(a) | Command::Attack(a) | Command::Ablate(a) | Command::Gradcheck(a) => a.json,
    };
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e}");
            if json {
                println!("{}", json!({ "error": { "kind": error_kind(&e), "message": e.to_string(), "exit_code": code } }));
            }
            code
        }
    }
}

pub fn run(command: &Command) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(args: &CommandArgs, command: &str) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(a) = args.alpha {
        cfg.train.loss.alpha = a;
    }
    if let Some(b) = args.beta {
        cfg.train.loss.beta = b;
    }
    if let Some(s) = args.states {
        cfg.gradcheck.states = s;
    }
    if args.touches_attack() {
        match command {
            "train" | "ablate" => {
                let mut inner = cfg.train.inner_attack.clone().unwrap_or_default();
                args.patch_attack(&mut inner)?;
                cfg.train.inner_attack = Some(inner);
            }
            "eval" => {
                if cfg.eval.attacks.is_empty() {
                    cfg.eval.attacks.push(AttackConfig::default());
                }
                for a in &mut cfg.eval.attacks {
                    args.patch_attack(a)?;
                }
            }
            "attack" => args.patch_attack(&mut cfg.attack)?,
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn emit<T: Serialize>(args: &CommandArgs, value: &T) {
    if args.json {
        println!("{}", serde_json::to_string(value).expect("report serializes"));
    }
}

fn load_model(args: &CommandArgs, cfg: &RunConfig) -> Result<DualEncoderModel> {
    let path = args.checkpoint.clone().unwrap_or_else(|| cfg.output_dir.join("checkpoint.cawm"));
    Ok(load_checkpoint(&path)?.model)
}

#[derive(Serialize)]
struct TimingRecord {
    phase: &'static str,
    epoch: usize,
    step: u64,
    seconds: f64,
}

fn timings(phase: &'static str, records: &[TrainLogRecord]) -> Vec<TimingRecord> {
    records
        .iter()
        .map(|r| TimingRecord { phase, epoch: r.epoch, step: r.step, seconds: r.duration_secs })
        .collect()
}

fn cmd_train(args: &CommandArgs) -> Result<i32> {
    let cfg = resolve_config(args, "train")?;
    let dir = out_dir(&cfg)?;
    let digest = cfg.digest();
    fs::write(dir.join("config.json"), cfg.to_json() + "\n")?;
    let started = Instant::now();

    let train = cfg.data.train.load()?;
    let (mut model, pre) = cfg.reference_model(&train)?;
    log::info!("pretrained {} steps; frozen snapshot taken", pre.records.len());
    let ckpt_path = dir.join("checkpoint.cawm");
    let save = |epoch: usize, model: &DualEncoderModel, opt: &crate::training::OptimizerState| {
        let ckpt = Checkpoint {
            model: model.clone(),
            optimizer: Some(opt.clone()),
            seed: cfg.seed,
            epoch: epoch as u64,
            config_digest: digest.clone(),
        };
        save_checkpoint(&ckpt_path, &ckpt)
    };
    let outcome = fit_with(&mut model, &train, &cfg.train, |e, m, o| {
        log::info!("epoch {e} done");
        save(e, m, o)
    })?;
    save(cfg.train.epochs, &model, &outcome.optimizer)?;

    write_jsonl(&dir.join("pretrain_log.jsonl"), &pre.records)?;
    write_jsonl(&dir.join("train_log.jsonl"), &outcome.records)?;
    let mut t = timings("pretrain", &pre.records);
    t.extend(timings("finetune", &outcome.records));
    write_jsonl(&dir.join("timings.jsonl"), &t)?;

    let summary = json!({
        "command": "train",
        "config_digest": digest,
        "seed": cfg.seed,
        "epochs": cfg.train.epochs,
        "steps": outcome.optimizer.step(),
        "model_digest": model.digest(),
        "final_losses": outcome.records.last().map(|r| r.losses),
        "checkpoint": "checkpoint.cawm",
    });
    write_json(&dir.join("summary.json"), &summary)?;
    eprintln!(
        "trained {} steps in {:.1}s; checkpoint at {}",
        outcome.optimizer.step(),
        started.elapsed().as_secs_f64(),
        ckpt_path.display()
    );
    emit(args, &summary);
    Ok(EXIT_OK)
}

fn cmd_eval(args: &CommandArgs) -> Result<i32> {
    let cfg = resolve_config(args, "eval")?;
    let model = load_model(args, &cfg)?;
    let data = cfg.data.eval.load()?;
    let report = evaluate(&model, &data, &cfg.eval.attacks, cfg.eval.batch_size)?;
    let dir = out_dir(&cfg)?;
    let doc = json!({ "command": "eval", "config_digest": cfg.digest(), "seed": cfg.seed, "report": report });
    write_json(&dir.join("eval_report.json"), &doc)?;
    eprintln!("{}: clean {:.2}%", report.dataset, 100.0 * report.clean_accuracy);
    for r in &report.robust {
        eprintln!("  {:<16} {:.2}%", r.attack, 100.0 * r.accuracy);
    }
    emit(args, &doc);
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct SampleRecord {
    index: usize,
    label: usize,
    clean_pred: usize,
    adv_pred: usize,
    success: bool,
    linf: f64,
}

fn cmd_attack(args: &CommandArgs) -> Result<i32> {
    let cfg = resolve_config(args, "attack")?;
    let model = load_model(args, &cfg)?;
    let data = cfg.data.eval.load()?;
    let model = model.with_prototypes(data.prototypes.clone())?;
    let (x, y) = (&data.x, &data.labels);
    let result = attack(&model, x, y, &cfg.attack)?;
    let clean_pred = model.predict(x, false)?;
    let adv_pred = model.predict(&result.x_adv, false)?;
    let rows: Vec<SampleRecord> = (0..data.len())
        .map(|i| SampleRecord {
            index: i,
            label: y[i],
            clean_pred: clean_pred[i],
            adv_pred: adv_pred[i],
            success: result.success_mask[i],
            linf: x.row(i).iter().zip(result.x_adv.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
        })
        .collect();
    let dir = out_dir(&cfg)?;
    write_jsonl(&dir.join("attack.jsonl"), &rows)?;
    let summary = json!({
        "command": "attack",
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "attack": cfg.attack,
        "samples": data.len(),
        "success_rate": result.success_rate(),
    });
    write_json(&dir.join("attack_summary.json"), &summary)?;
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for r in &rows {
        writeln!(lock, "{}", serde_json::to_string(r).expect("record serializes"))?;
    }
    eprintln!("{}: success rate {:.2}%", cfg.attack.label(), 100.0 * result.success_rate());
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ArmSummary<'a> {
    #[serde(flatten)]
    arm: &'a AblationArm,
    /// Digest of the arm's training config with α and β cleared.
    shared_config_digest: String,
}

fn cmd_ablate(args: &CommandArgs) -> Result<i32> {
    let cfg = resolve_config(args, "ablate")?;
    let train = cfg.data.train.load()?;
    let eval_data = cfg.data.eval.load()?;
    let (base, _) = cfg.reference_model(&train)?;
    let report = run_ablation(&base, &train, &eval_data, &cfg.train, &cfg.eval.attacks, cfg.eval.batch_size)?;
    let arms: Vec<ArmSummary> = report
        .arms
        .iter()
        .map(|arm| {
            let mut t = cfg.train.clone();
            t.loss = CawConfig { alpha: 0.0, beta: 0.0, ..t.loss };
            ArmSummary { arm, shared_config_digest: train_config_digest(&t) }
        })
        .collect();
    let doc = json!({
        "command": "ablate",
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "reference": report.reference,
        "arms": arms,
    });
    let dir = out_dir(&cfg)?;
    write_json(&dir.join("ablation.json"), &doc)?;
    fs::write(dir.join("ablation.csv"), ablation_csv(&report))?;
    eprintln!("{:<10} {:>8} {:>8} {:>8}", "arm", "robust", "clean", "average");
    for a in std::iter::once(&report.reference).chain(&report.arms) {
        eprintln!(
            "{:<10} {:>8.2} {:>8.2} {:>8.2}",
            a.name,
            100.0 * a.robust_accuracy,
            100.0 * a.clean_accuracy,
            100.0 * a.average
        );
    }
    emit(args, &doc);
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &CommandArgs) -> Result<i32> {
    let mut cfg = resolve_config(args, "gradcheck")?;
    cfg.gradcheck.inject_fault = args.inject_fault;
    let started = Instant::now();
    let report = run_gradcheck(&cfg.gradcheck)?;
    let dir = out_dir(&cfg)?;
    let doc = json!({ "command": "gradcheck", "config_digest": cfg.digest(), "seed": cfg.gradcheck.seed, "report": report });
    write_json(&dir.join("gradcheck.json"), &doc)?;
    for c in &report.components {
        eprintln!(
            "{:<28} max rel err {:.3e}  {}",
            c.component,
            c.max_relative_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    eprintln!("{} states per component in {:.2}s", cfg.gradcheck.states, started.elapsed().as_secs_f64());
    emit(args, &doc);
    if report.passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed: {}", report.failing().join(", "));
        Ok(EXIT_GRADCHECK)
    }
}
