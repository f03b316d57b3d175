//! Command-line front end. Every failure is reported on stderr as
//! `error[<code>]: <message>` and maps to a nonzero exit status.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::confmask::{
    grow_mask, reliability_weights, threshold_mask, Connectivity, MaskConfig, DEFAULT_T_R, DEFAULT_T_U,
};
use crate::eval::{emit_report, evaluate_checkpoint, evaluate_generator, EvalError, Metrics};
use crate::tensor::Tensor;
use crate::toyscenes::{load_labeled, read_map, write_dataset, write_map, Domain, MapFile, SceneError, SceneSpec};
use crate::trainer::{train, Preset, TrainConfig, TrainError, TrainLog, LOG_JSONL};

pub const SEED_ENV: &str = "UDA_FORGE_SEED";

pub const SPLIT_SOURCE: u64 = 0;
pub const SPLIT_TARGET: u64 = 1;
pub const SPLIT_VAL: u64 = 2;
pub const SPLIT_SOURCE_VAL: u64 = 3;

/// Directory names produced by `gen-data`.
pub const SOURCE_DIR: &str = "source";
pub const TARGET_DIR: &str = "target";
pub const VAL_DIR: &str = "target_val";
pub const SOURCE_VAL_DIR: &str = "source_val";

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        let code = match e {
            SceneError::Io { .. } => "io",
            SceneError::Spec(_) => "config",
            _ => "data",
        };
        CliError::new(code, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::new("config", m),
            TrainError::Scene(s) => s.into(),
            TrainError::Io { .. } => CliError::new("io", e.to_string()),
            other => CliError::new("train", other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::Io { .. } => "io",
            EvalError::Checkpoint(ref c) => match c {
                crate::trainer::CheckpointError::Io { .. } => "io",
                _ => "checkpoint",
            },
            EvalError::Scene(SceneError::Io { .. }) => "io",
            _ => "eval",
        };
        CliError::new(code, e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Complete JSON configuration: scene generation, training, and default
/// paths. Flags given on the command line take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene
            .validate()
            .map_err(|e| CliError::new("config", format!("scene: {e}")))?;
        self.train.validate().map_err(|e| CliError::new("config", e))
    }

    /// Reads `path` (or defaults), then applies the seed environment override.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.train.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::new("config", format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "uda-forge",
    version,
    about = "Adversarial domain adaptation with region-grown self-teaching on toy scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate source, target and validation splits of toy scenes.
    GenData(GenDataArgs),
    /// Train the generator and discriminator on a source/target pair.
    Train(TrainArgs),
    /// Train once per scaling factor of one loss weight and tabulate target mIoU.
    Sweep(SweepArgs),
    /// Build a grown mask and reliability weights from probability and confidence maps.
    Mask(MaskArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Write plots and tables from a training log and optional metrics.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; receives source/, target/, target_val/ and source_val/.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub count_source: usize,
    #[arg(long, default_value_t = 200)]
    pub count_target: usize,
    /// Labeled target samples for evaluation.
    #[arg(long, default_value_t = 50)]
    pub count_val: usize,
    /// Labeled source samples for evaluation.
    #[arg(long, default_value_t = 50)]
    pub count_source_val: usize,
    /// Base seed (defaults to the config seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled source dataset.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Target dataset; labels are never read.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// One of: supervised, adversarial-only, self-teach-hard, no-region-growing,
    /// no-disc-weighting, no-class-weighting, full.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Labeled target dataset used to score each run.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss weight to scale: w_s, w_t or w_prime.
    #[arg(long)]
    pub param: String,
    /// Comma-separated scaling factors.
    #[arg(long, default_value = "0.1,0.25,0.5,1,2,4,10")]
    pub factors: String,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Number of trainings to run concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Probability map file, C×H×W.
    #[arg(long)]
    pub probmap: PathBuf,
    /// Confidence map file, 1×H×W.
    #[arg(long)]
    pub confmap: PathBuf,
    /// Seed threshold on confidence (strict).
    #[arg(long, default_value_t = DEFAULT_T_U)]
    pub t_u: f64,
    /// Growth threshold on class probability (strict).
    #[arg(long, default_value_t = DEFAULT_T_R)]
    pub t_r: f64,
    /// Neighborhood used for growth: 4 or 8.
    #[arg(long, default_value_t = 4)]
    pub connectivity: u8,
    /// Stop growth after this many expansion rounds.
    #[arg(long)]
    pub max_growth_rounds: Option<usize>,
    /// Output directory; receives mask.udam and weights.udam.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for metrics.json and the report.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log (JSON lines) to plot alongside the metrics.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Training log (JSON lines).
    #[arg(long)]
    pub log: PathBuf,
    /// metrics.json from `eval`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub const MASK_FILE: &str = "mask.udam";
pub const WEIGHTS_FILE: &str = "weights.udam";
pub const SWEEP_FILE: &str = "sweep.csv";

fn require(path: Option<PathBuf>, fallback: Option<&PathBuf>, flag: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.cloned())
        .ok_or_else(|| CliError::new("usage", format!("{flag} is required (flag or config paths)")))
}

/// Ensures `dir` exists and is empty, clearing it first when `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    let io = |e: std::io::Error| CliError::new("io", format!("{}: {e}", dir.display()));
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(io)?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::new(
                    "exists",
                    format!("{} exists and is not empty; pass --force to replace it", dir.display()),
                ));
            }
            fs::remove_dir_all(dir).map_err(io)?;
        }
    }
    fs::create_dir_all(dir).map_err(io)
}

fn parse_preset(name: &str) -> Result<Preset> {
    Preset::parse(name).ok_or_else(|| {
        let all: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
        CliError::new(
            "usage",
            format!("unknown preset {name:?}; expected one of {}", all.join(", ")),
        )
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

pub fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    cfg.validate()?;
    let out = require(args.out, cfg.paths.data.as_ref(), "--out")?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    prepare_out_dir(&out, args.force)?;
    let splits = [
        (SOURCE_DIR, Domain::Source, args.count_source, SPLIT_SOURCE),
        (TARGET_DIR, Domain::Target, args.count_target, SPLIT_TARGET),
        (VAL_DIR, Domain::Target, args.count_val, SPLIT_VAL),
        (SOURCE_VAL_DIR, Domain::Source, args.count_source_val, SPLIT_SOURCE_VAL),
    ];
    for (name, domain, count, split) in splits {
        write_dataset(&out.join(name), &cfg.scene, domain, count, seed, split)?;
        println!(
            "wrote {count} {} samples to {}",
            domain.name(),
            out.join(name).display()
        );
    }
    Ok(())
}

struct TrainSetup {
    cfg: TrainConfig,
    source: PathBuf,
    target: PathBuf,
}

fn train_setup(
    config: Option<&Path>,
    source: Option<PathBuf>,
    target: Option<PathBuf>,
    preset: Option<&str>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<(RunConfig, TrainSetup)> {
    let run_cfg = RunConfig::load(config)?;
    let mut cfg = run_cfg.train.clone();
    if let Some(p) = preset {
        parse_preset(p)?.apply(&mut cfg);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg.total_steps = n;
    }
    let data = run_cfg.paths.data.clone();
    let source = require(
        source,
        run_cfg
            .paths
            .source
            .as_ref()
            .or(data.map(|d| d.join(SOURCE_DIR)).as_ref()),
        "--source",
    )?;
    let target = require(
        target,
        run_cfg
            .paths
            .target
            .as_ref()
            .or(run_cfg.paths.data.clone().map(|d| d.join(TARGET_DIR)).as_ref()),
        "--target",
    )?;
    let checked = RunConfig {
        train: cfg.clone(),
        ..run_cfg.clone()
    };
    checked.validate()?;
    Ok((run_cfg, TrainSetup { cfg, source, target }))
}

fn write_resolved_config(out: &Path, cfg: &TrainConfig) -> Result<()> {
    let path = out.join("train_config.json");
    let json = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    fs::write(&path, json).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn run_training(setup: &TrainSetup, out: &Path, echo: bool) -> Result<crate::trainer::TrainOutcome> {
    write_resolved_config(out, &setup.cfg)?;
    let outcome = train(&setup.cfg, &setup.source, &setup.target, out, &mut |r, _| {
        if echo && (r.step % 100 == 0 || r.step + 1 == setup.cfg.total_steps) {
            println!("{}", r.summary());
        }
    })?;
    Ok(outcome)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let (run_cfg, setup) = train_setup(
        args.config.as_deref(),
        args.source,
        args.target,
        args.preset.as_deref(),
        args.seed,
        args.steps,
    )?;
    let out = require(args.out, run_cfg.paths.out.as_ref(), "--out")?;
    prepare_out_dir(&out, args.force)?;
    run_training(&setup, &out, true)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Which loss weight a sweep scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    WS,
    WT,
    WPrime,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "w_s" => Ok(SweepParam::WS),
            "w_t" => Ok(SweepParam::WT),
            "w_prime" => Ok(SweepParam::WPrime),
            other => Err(CliError::new(
                "usage",
                format!("unknown sweep parameter {other:?}; expected w_s, w_t or w_prime"),
            )),
        }
    }

    pub fn scale(self, cfg: &mut TrainConfig, factor: f64) {
        let w = &mut cfg.loss_weights;
        match self {
            SweepParam::WS => w.w_s *= factor,
            SweepParam::WT => w.w_t *= factor,
            SweepParam::WPrime => w.w_prime *= factor,
        }
    }
}

pub fn parse_factors(text: &str) -> Result<Vec<f64>> {
    let factors: Vec<f64> = text
        .split(',')
        .map(|f| {
            let f = f.trim();
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| CliError::new("usage", format!("bad factor {f:?}; expected a number >= 0")))
        })
        .collect::<Result<_>>()?;
    if factors.is_empty() {
        return Err(CliError::new("usage", "--factors is empty"));
    }
    Ok(factors)
}

/// Directory name for a sweep run, e.g. `factor_0.25`.
pub fn factor_dir(factor: f64) -> String {
    format!("factor_{factor}")
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let param = SweepParam::parse(&args.param)?;
    let factors = parse_factors(&args.factors)?;
    if args.parallel == 0 {
        return Err(CliError::new("usage", "--parallel must be >= 1"));
    }
    let (run_cfg, base) = train_setup(
        args.config.as_deref(),
        args.source,
        args.target,
        args.preset.as_deref(),
        args.seed,
        args.steps,
    )?;
    let eval_dir = require(
        args.eval,
        run_cfg
            .paths
            .eval
            .as_ref()
            .or(run_cfg.paths.data.clone().map(|d| d.join(VAL_DIR)).as_ref()),
        "--eval",
    )?;
    let out = require(args.out, run_cfg.paths.out.as_ref(), "--out")?;
    let mut setups = Vec::new();
    for &f in &factors {
        let mut cfg = base.cfg.clone();
        param.scale(&mut cfg, f);
        cfg.validate().map_err(|e| CliError::new("config", e))?;
        setups.push(TrainSetup {
            cfg,
            source: base.source.clone(),
            target: base.target.clone(),
        });
    }
    let eval_samples = load_labeled(&eval_dir)?;
    prepare_out_dir(&out, args.force)?;

    let run_one = |(factor, setup): (f64, &TrainSetup)| -> Result<Metrics> {
        let dir = out.join(factor_dir(factor));
        fs::create_dir_all(&dir).map_err(|e| CliError::new("io", format!("{}: {e}", dir.display())))?;
        let outcome = run_training(setup, &dir, false)?;
        let metrics = evaluate_generator(
            &outcome.generator,
            &eval_samples,
            &dir.join(crate::trainer::FINAL_CHECKPOINT).display().to_string(),
            &eval_dir.display().to_string(),
        )?;
        emit_report(&outcome.log, Some(&metrics), &dir)?;
        println!("{} x{factor}: target mIoU {:.4}", args.param, metrics.miou);
        Ok(metrics)
    };

    let jobs: Vec<(f64, &TrainSetup)> = factors.iter().copied().zip(&setups).collect();
    let mut results: Vec<Option<Result<Metrics>>> = (0..jobs.len()).map(|_| None).collect();
    for (chunk_jobs, chunk_out) in jobs.chunks(args.parallel).zip(results.chunks_mut(args.parallel)) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk_jobs
                .iter()
                .map(|&job| scope.spawn(move || run_one(job)))
                .collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(
                    h.join()
                        .unwrap_or_else(|_| Err(CliError::new("train", "training thread panicked"))),
                );
            }
        });
    }

    let mut csv = String::from("param,factor,w_s,w_t,w_prime,miou\n");
    for ((factor, setup), result) in jobs.iter().zip(results) {
        let m = result.expect("every job ran")?;
        let w = setup.cfg.loss_weights;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            args.param, factor, w.w_s, w.w_t, w.w_prime, m.miou
        ));
    }
    let path = out.join(SWEEP_FILE);
    fs::write(&path, csv).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_mask(args: MaskArgs) -> Result<()> {
    let connectivity = Connectivity::try_from(args.connectivity).map_err(|e| CliError::new("usage", e))?;
    let mask_cfg = MaskConfig {
        t_u: args.t_u,
        t_r: args.t_r,
        connectivity,
        max_growth_rounds: args.max_growth_rounds,
    };
    mask_cfg.validate().map_err(|e| CliError::new("usage", e))?;
    let probs = read_map(&args.probmap)?;
    let conf = read_map(&args.confmap)?;
    if conf.channels() != 1 || (conf.height(), conf.width()) != (probs.height(), probs.width()) {
        return Err(CliError::new(
            "shape",
            format!(
                "confidence map is {}x{}x{} but must be 1x{}x{} to match the probability map",
                conf.channels(),
                conf.height(),
                conf.width(),
                probs.height(),
                probs.width()
            ),
        ));
    }
    let (h, w) = (probs.height(), probs.width());
    let conf_plane = conf.values.data();
    let seeds = threshold_mask(conf_plane, h, w, mask_cfg.t_u);
    let grown = grow_mask(
        &seeds,
        &probs.values,
        mask_cfg.t_r,
        connectivity,
        mask_cfg.max_growth_rounds,
    )
    .map_err(|e| CliError::new("shape", e.to_string()))?;
    let weights = reliability_weights(&grown.mask, conf_plane);
    let mask_values: Vec<f64> = grown.mask.data().iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();

    fs::create_dir_all(&args.out).map_err(|e| CliError::new("io", format!("{}: {e}", args.out.display())))?;
    let as_map = |values: Vec<f64>| MapFile {
        values: Tensor::new(vec![1, h, w], values).expect("plane shape"),
        labels: grown.classes.clone(),
        domain: probs.domain,
        seed: probs.seed,
    };
    write_map(&as_map(mask_values), &args.out.join(MASK_FILE))?;
    write_map(&as_map(weights), &args.out.join(WEIGHTS_FILE))?;
    println!(
        "selected {} of {} pixels ({} seeds); wrote {} and {}",
        grown.mask.count(),
        h * w,
        seeds.count(),
        args.out.join(MASK_FILE).display(),
        args.out.join(WEIGHTS_FILE).display()
    );
    Ok(())
}

fn read_log(path: &Path) -> Result<TrainLog> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    TrainLog::from_jsonl(&text).map_err(|e| CliError::new("format", format!("{}: {e}", path.display())))
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    if !args.checkpoint.is_file() {
        return Err(CliError::new(
            "io",
            format!("checkpoint {} does not exist", args.checkpoint.display()),
        ));
    }
    let metrics = evaluate_checkpoint(&args.checkpoint, &args.dataset)?;
    let log = match &args.log {
        Some(p) => read_log(p)?,
        None => {
            let sibling = args.checkpoint.with_file_name(LOG_JSONL);
            if sibling.is_file() {
                read_log(&sibling)?
            } else {
                TrainLog::default()
            }
        }
    };
    emit_report(&log, Some(&metrics), &args.out)?;
    println!("mIoU {:.4} over {} pixels", metrics.miou, metrics.pixels_evaluated);
    for c in &metrics.per_class {
        match c.iou {
            Some(v) => println!("  {:<8} {:.4}", c.class, v),
            None => println!("  {:<8} absent", c.class),
        }
    }
    Ok(())
}

pub fn cmd_report(args: ReportArgs) -> Result<()> {
    let log = read_log(&args.log)?;
    let metrics = match &args.metrics {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?;
            Some(
                serde_json::from_str::<Metrics>(&text)
                    .map_err(|e| CliError::new("format", format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    emit_report(&log, metrics.as_ref(), &args.out)?;
    println!("wrote report to {}", args.out.display());
    Ok(())
}
