use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use apgan::config::{ExperimentConfig, ExperimentError};
use apgan::data::save_image_folder;
use apgan::evaluation::{
    augmentation_experiment, emit_sample_grid, evaluate_bank, placement_sweep, EvalError, EvalSplits, RealReference,
    SampleBank, StubKind,
};
use apgan::train::{
    train, Checkpoint, CheckpointError, ImageSource, TrainError, TrainOptions, Trainer, FINAL_CHECKPOINT,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser)]
#[command(name = "apgan", version, about = "Self-attention progressive GAN: train, sample, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace a previous run in --out.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stub {
    Replay,
    Noise,
}

impl From<Stub> for StubKind {
    fn from(s: Stub) -> Self {
        match s {
            Stub::Replay => StubKind::Replay,
            Stub::Noise => StubKind::Noise,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a GAN on the configured dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Sample a bank of images per class and draw a grid.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
    },
    /// GAN-train / GAN-test of a checkpoint, a saved bank or a harness stub.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["bank", "stub"])]
        checkpoint: Option<PathBuf>,
        /// Folder of generated images, one subdirectory per class.
        #[arg(long, conflicts_with = "stub")]
        bank: Option<PathBuf>,
        #[arg(long, value_enum)]
        stub: Option<Stub>,
    },
    /// Attention placement sweep; writes a table of GAN-train / GAN-test.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Keep finished arms already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Classification with real, real+synthetic and real+augmented data.
    AugmentExp {
        #[command(flatten)]
        common: Common,
        /// Synthetic source as LABEL=CHECKPOINT; repeatable.
        #[arg(long = "generator", value_parser = parse_generator)]
        generators: Vec<(String, PathBuf)>,
        /// Add a harness stub as a synthetic source.
        #[arg(long, value_enum)]
        stub: Vec<Stub>,
    },
    /// Render the toy dataset to a class-folder tree.
    Toy {
        #[command(flatten)]
        common: Common,
    },
    /// Print the network architecture for a config.
    Arch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_generator(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected LABEL=CHECKPOINT, got '{s}'")),
    }
}

/// Failure split by exit code: 1 for anything the user can fix in the
/// invocation or config, 2 for failures while doing the work.
#[derive(Debug)]
enum CliError {
    Validation(Vec<String>),
    Runtime(String),
}

impl CliError {
    fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(v) => {
                for (i, m) in v.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "error: validation: {m}")?;
                }
                Ok(())
            }
            CliError::Runtime(m) => write!(f, "error: runtime: {m}"),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Invalid(v) => CliError::Validation(v),
            ExperimentError::Read { .. } | ExperimentError::Parse(_) => CliError::invalid(one_line(&e)),
            ExperimentError::Data(d) => CliError::Runtime(one_line(&d)),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => CliError::Validation(
                c.problems
                    .iter()
                    .map(|p| format!("train.{}: {}", p.field, p.reason))
                    .collect(),
            ),
            other => CliError::Runtime(one_line(&other)),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => CliError::invalid(m),
            EvalError::TooFew { .. } => CliError::invalid(one_line(&e)),
            EvalError::Train(t) => t.into(),
            other => CliError::Runtime(one_line(&other)),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Runtime(one_line(&e))
    }
}

impl From<apgan::networks::NetworkError> for CliError {
    fn from(e: apgan::networks::NetworkError) -> Self {
        CliError::invalid(one_line(&e))
    }
}

fn one_line(e: &dyn fmt::Display) -> String {
    e.to_string().replace('\n', "; ")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub code_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Creates `out`, refusing to touch an existing non-empty directory unless
/// it is resumed, or it is a previous run and `overwrite` is set.
fn prepare_out(out: &Path, overwrite: bool, resume: bool) -> Result<(), CliError> {
    let non_empty = out.is_dir() && std::fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if out.exists() && !out.is_dir() {
        return Err(CliError::invalid(format!("--out {} is not a directory", out.display())));
    }
    if non_empty && !resume {
        if !overwrite {
            return Err(CliError::invalid(format!(
                "--out {} is not empty; pass --overwrite to replace it",
                out.display()
            )));
        }
        if !out.join(MANIFEST_FILE).exists() {
            return Err(CliError::invalid(format!(
                "--out {} holds files that are not an apgan run; refusing to delete them",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot clear {}: {e}", out.display())))?;
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn splits(cfg: &ExperimentConfig) -> Result<EvalSplits, CliError> {
    let (ds, report) = cfg.load_dataset()?;
    if let Some(r) = report {
        info!("loaded {} images, skipped {}", r.loaded, r.skipped.len());
    }
    info!("dataset histogram {:?}", ds.named_histogram());
    Ok(EvalSplits::new(
        &ds,
        cfg.data.val_per_class,
        cfg.data.held_out_per_class,
        cfg.seed,
    )?)
}

fn load_trainer(path: &Path) -> Result<Trainer, CliError> {
    if !path.is_file() {
        return Err(CliError::invalid(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Trainer::from_checkpoint(Checkpoint::load(path)?)?)
}

/// Highest-step checkpoint written by a previous `train` into `out`.
fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    let mut candidates = vec![out.join(FINAL_CHECKPOINT)];
    if let Ok(rd) = std::fs::read_dir(out.join("checkpoints")) {
        candidates.extend(rd.filter_map(|e| e.ok()).map(|e| e.path()));
    }
    for p in candidates {
        if let Ok(ck) = Checkpoint::load(&p) {
            if best.as_ref().is_none_or(|(s, _)| ck.step > *s) {
                best = Some((ck.step, p));
            }
        }
    }
    best.map(|(_, p)| p)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializes");
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool, max_steps: Option<u64>) -> Result<(), CliError> {
    let s = splits(cfg)?;
    let spec = cfg.network_spec(s.train.n_classes())?;
    let mut trainer = if resume {
        let path = latest_checkpoint(out)
            .ok_or_else(|| CliError::invalid(format!("--resume: no checkpoint in {}", out.display())))?;
        let ck = Checkpoint::load(&path)?;
        if ck.config != cfg.train || ck.spec != spec {
            return Err(CliError::invalid(format!(
                "--resume: {} was written with a different network or train config",
                path.display()
            )));
        }
        info!("resuming from {} at step {}", path.display(), ck.step);
        Trainer::from_checkpoint(ck)?
    } else {
        Trainer::new(spec, cfg.train.clone())?
    };
    print!("{}", trainer.spec().summary());
    let mut src = ImageSource::new(s.train, cfg.train.final_resolution, cfg.gan_augment.clone())?;
    let outcome = train(
        &mut trainer,
        &mut src,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
            max_steps,
        },
    )?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} images {} stage {} d_loss {:.4} g_loss {:.4}",
            last.step, last.images_shown, last.stage, last.d_loss, last.g_loss
        );
    }
    if let Some(p) = outcome.final_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn cmd_generate(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, per_class: usize) -> Result<(), CliError> {
    if per_class == 0 {
        return Err(CliError::invalid("--per-class must be >= 1"));
    }
    let trainer = load_trainer(checkpoint)?;
    let names = cfg.class_names()?;
    let res = trainer.spec().final_resolution() as usize;
    let bank = SampleBank::from_generator(trainer.generator(), trainer.generator_params(), &names, per_class, res, cfg.seed)?;
    bank.save(&out.join("samples"))?;
    emit_sample_grid(&bank.images, per_class, &out.join("grid.png"))?;
    println!("{} samples in {}", bank.images.len(), out.join("samples").display());
    Ok(())
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    bank_dir: Option<&Path>,
    stub: Option<StubKind>,
) -> Result<(), CliError> {
    let s = splits(cfg)?;
    let res = cfg.classifier.input_resolution;
    let per = cfg.eval.bank_per_class;
    let bank = match (checkpoint, bank_dir, stub.or(cfg.eval.stub)) {
        (Some(c), _, _) => {
            let t = load_trainer(c)?;
            SampleBank::from_generator(t.generator(), t.generator_params(), s.val.class_names(), per, res, cfg.seed)?
        }
        (None, Some(b), _) => SampleBank::load(b, res, s.val.class_names())?,
        (None, None, Some(kind)) => SampleBank::stub(kind, &s, per, res, cfg.seed)?,
        (None, None, None) => return Err(CliError::invalid("one of --checkpoint, --bank or --stub is required")),
    };
    let reference = RealReference::train(&s.train, &s.val, &cfg.classifier)?;
    let report = evaluate_bank(&bank, &reference, &s, &cfg.classifier, cfg.eval.equal_budget, &cfg.hash())?;
    report.write(out, "eval_report")?;
    emit_sample_grid(&bank.images, cfg.eval.grid_columns, &out.join("bank_grid.png"))?;
    println!(
        "source {} gan_train {:.4} gan_test {:.4} real {:.4}",
        report.source, report.gan_train, report.gan_test, report.real_baseline
    );
    Ok(())
}

fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let s = splits(cfg)?;
    let base = cfg.base_network_spec(s.train.n_classes())?;
    let report = placement_sweep(
        &base,
        &cfg.train,
        &s,
        cfg.gan_augment.as_ref(),
        &cfg.sweep,
        &cfg.classifier,
        out,
        &cfg.hash(),
    )?;
    print!("{}", report.to_table_csv());
    Ok(())
}

fn cmd_augment_exp(
    cfg: &ExperimentConfig,
    out: &Path,
    generators: &[(String, PathBuf)],
    stubs: &[StubKind],
) -> Result<(), CliError> {
    let s = splits(cfg)?;
    let res = cfg.classifier.input_resolution;
    let n_synth = cfg.augment_experiment.n_synth_per_class;
    let mut banks = Vec::new();
    for (label, path) in generators {
        let t = load_trainer(path)?;
        banks.push((
            label.clone(),
            SampleBank::from_generator(t.generator(), t.generator_params(), s.val.class_names(), n_synth, res, cfg.seed)?,
        ));
    }
    for &kind in stubs {
        let label = match kind {
            StubKind::Replay => "replay",
            StubKind::Noise => "noise",
        };
        banks.push((label.to_string(), SampleBank::stub(kind, &s, n_synth, res, cfg.seed)?));
    }
    let refs: Vec<(&str, &SampleBank)> = banks.iter().map(|(l, b)| (l.as_str(), b)).collect();
    let report = augmentation_experiment(
        &s.train,
        &s.val,
        &refs,
        cfg.augment_experiment.n_real_per_class,
        n_synth,
        &cfg.augment_experiment.policy,
        &cfg.classifier,
    )?;
    report.write(out)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn cmd_toy(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let ds = apgan::data::make_toy_dataset(&cfg.toy_spec()).map_err(|e| CliError::invalid(one_line(&e)))?;
    let root = out.join("dataset");
    save_image_folder(&ds, &root).map_err(|e| CliError::Runtime(one_line(&e)))?;
    println!("{} images in {}", ds.len(), root.display());
    for (name, n) in ds.named_histogram() {
        println!("{name}\t{n}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common) = match &cli.command {
        Command::Arch { config, seed } => {
            let cfg = load_config(config, *seed)?;
            let names = cfg.class_names()?;
            print!("{}", cfg.network_spec(names.len())?.summary());
            return Ok(());
        }
        Command::Train { common, .. } => ("train", common),
        Command::Generate { common, .. } => ("generate", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::Sweep { common, .. } => ("sweep", common),
        Command::AugmentExp { common, .. } => ("augment-exp", common),
        Command::Toy { common } => ("toy", common),
    };
    let cfg = load_config(&common.config, common.seed)?;
    let resume = matches!(cli.command, Command::Train { resume: true, .. } | Command::Sweep { resume: true, .. });
    prepare_out(&common.out, common.overwrite, resume)?;
    let started = now();
    std::fs::write(common.out.join("config.toml"), cfg.to_toml())
        .map_err(|e| CliError::Runtime(format!("cannot write config copy: {e}")))?;
    let out = common.out.as_path();
    let result = match &cli.command {
        Command::Train { resume, max_steps, .. } => cmd_train(&cfg, out, *resume, *max_steps),
        Command::Generate {
            checkpoint, per_class, ..
        } => cmd_generate(&cfg, out, checkpoint, *per_class),
        Command::Eval {
            checkpoint, bank, stub, ..
        } => cmd_eval(&cfg, out, checkpoint.as_deref(), bank.as_deref(), stub.map(Into::into)),
        Command::Sweep { .. } => cmd_sweep(&cfg, out),
        Command::AugmentExp { generators, stub, .. } => {
            let stubs: Vec<StubKind> = stub.iter().map(|&s| s.into()).collect();
            cmd_augment_exp(&cfg, out, generators, &stubs)
        }
        Command::Toy { .. } => cmd_toy(&cfg, out),
        Command::Arch { .. } => unreachable!("handled above"),
    };
    let manifest = RunManifest {
        command: name.to_string(),
        config_path: common.config.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        out_dir: common.out.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now(),
        status: match &result {
            Ok(()) => "ok".into(),
            Err(e) => one_line(e),
        },
    };
    write_json(&common.out.join(MANIFEST_FILE), &manifest)?;
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
