//! Two-network training loop: `G` by SGD with momentum on the combined
//! objective, `D` by Adam on the mixed fake batch against source one-hot maps.

pub mod checkpoint;
pub mod log;
pub mod optim;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confmask::{batch_reliability, MaskConfig, ReliabilityMode};
use crate::losses::{
    loss_adversarial, loss_discriminator, loss_full, loss_self_teach, loss_supervised_ce, LossError, LossParts,
    LossWeights,
};
use crate::nets::{discriminator_forward, generator_forward, DiscriminatorParams, GeneratorParams, NetError};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::toyscenes::{
    class_frequencies, load_labeled, load_unlabeled, mix_seed, one_hot_batch, ClassWeights, Sample, SceneError,
    UnlabeledSample,
};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use log::{StepRecord, TrainLog};
pub use optim::{sgd_momentum_step, Adam, Sgd};

const STREAM_G_INIT: u64 = 11;
const STREAM_D_INIT: u64 = 12;
const STREAM_SOURCE_ORDER: u64 = 13;
const STREAM_TARGET_ORDER: u64 = 14;

pub const FINAL_CHECKPOINT: &str = "final.udac";
pub const LOG_CSV: &str = "trainlog.csv";
pub const LOG_JSONL: &str = "trainlog.jsonl";
pub const CLASS_WEIGHTS_FILE: &str = "class_weights.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] optim::ShapeMismatch),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("step {step}: {what} became non-finite")]
    Diverged { step: usize, what: &'static str },
}

type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// `None` means a quarter of `total_steps`.
    pub warmup_steps: Option<usize>,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Adam is used for `D` with the learning rate of the `G` schedule.
    pub adam_betas: [f64; 2],
    pub adam_epsilon: f64,
    pub loss_weights: LossWeights,
    pub mask: MaskConfig,
    pub enable_adv: bool,
    pub enable_self_teach: bool,
    pub enable_region_growing: bool,
    pub enable_disc_weighting: bool,
    pub enable_class_weighting: bool,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Record per-step wall time; when false the `ms` column is 0 and logs
    /// are byte-identical across runs.
    pub log_wall_time: bool,
    /// The combined objective is divided by `H·W` and multiplied by this
    /// factor before backpropagation. Logged values stay unscaled sums.
    pub loss_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            warmup_steps: None,
            batch_size: 2,
            lr_start: 1e-4,
            lr_end: 1e-6,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            adam_betas: [0.9, 0.999],
            adam_epsilon: 1e-8,
            loss_weights: LossWeights::default(),
            mask: MaskConfig::default(),
            enable_adv: true,
            enable_self_teach: true,
            enable_region_growing: true,
            enable_disc_weighting: true,
            enable_class_weighting: true,
            seed: 0,
            checkpoint_every: 500,
            log_wall_time: true,
            loss_scale: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 4)
    }

    /// Whether `D` exists at all in this configuration.
    pub fn uses_discriminator(&self) -> bool {
        self.enable_adv || self.enable_self_teach
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.total_steps == 0 {
            return Err("train.total_steps must be > 0".into());
        }
        if self.warmup() > self.total_steps {
            return Err(format!(
                "train.warmup_steps must be <= train.total_steps ({}), got {}",
                self.total_steps,
                self.warmup()
            ));
        }
        if self.batch_size == 0 {
            return Err("train.batch_size must be > 0".into());
        }
        for (name, v) in [("lr_start", self.lr_start), ("lr_end", self.lr_end)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("train.{name} must be a finite value > 0, got {v}"));
            }
        }
        if self.lr_end > self.lr_start {
            return Err(format!(
                "train.lr_end must be <= train.lr_start ({}), got {}",
                self.lr_start, self.lr_end
            ));
        }
        if !(self.lr_power > 0.0 && self.lr_power.is_finite()) {
            return Err(format!("train.lr_power must be > 0, got {}", self.lr_power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (i, b) in self.adam_betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(format!("train.adam_betas[{i}] must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(format!("train.adam_epsilon must be > 0, got {}", self.adam_epsilon));
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return Err(format!(
                "train.loss_scale must be a finite value > 0, got {}",
                self.loss_scale
            ));
        }
        self.loss_weights.validate().map_err(|e| format!("train.{e}"))?;
        self.mask.validate().map_err(|e| format!("train.{e}"))?;
        Ok(())
    }

    fn reliability_mode(&self) -> ReliabilityMode {
        ReliabilityMode {
            region_growing: self.enable_region_growing,
            disc_weighting: self.enable_disc_weighting,
        }
    }
}

/// Named switch combinations, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Supervised,
    AdversarialOnly,
    /// Self-teaching with a hard threshold mask: no growth, uniform weights,
    /// no class weighting.
    SelfTeachHard,
    NoRegionGrowing,
    NoDiscWeighting,
    NoClassWeighting,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Supervised,
        Preset::AdversarialOnly,
        Preset::SelfTeachHard,
        Preset::NoRegionGrowing,
        Preset::NoDiscWeighting,
        Preset::NoClassWeighting,
        Preset::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Supervised => "supervised",
            Preset::AdversarialOnly => "adversarial-only",
            Preset::SelfTeachHard => "self-teach-hard",
            Preset::NoRegionGrowing => "no-region-growing",
            Preset::NoDiscWeighting => "no-disc-weighting",
            Preset::NoClassWeighting => "no-class-weighting",
            Preset::Full => "full",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        let (adv, st, rg, dw, cw) = match self {
            Preset::Supervised => (false, false, false, false, false),
            Preset::AdversarialOnly => (true, false, false, false, false),
            Preset::SelfTeachHard => (true, true, false, false, false),
            Preset::NoRegionGrowing => (true, true, false, true, true),
            Preset::NoDiscWeighting => (true, true, true, false, true),
            Preset::NoClassWeighting => (true, true, true, true, false),
            Preset::Full => (true, true, true, true, true),
        };
        cfg.enable_adv = adv;
        cfg.enable_self_teach = st;
        cfg.enable_region_growing = rg;
        cfg.enable_disc_weighting = dw;
        cfg.enable_class_weighting = cw;
    }
}

/// Polynomial decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn poly_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    let f = (1.0 - step as f64 / cfg.total_steps as f64).powf(cfg.lr_power);
    // Written as a convex combination so both endpoints are exact.
    cfg.lr_start * f + cfg.lr_end * (1.0 - f)
}

/// Networks and bookkeeping produced by a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub generator: GeneratorParams,
    pub discriminator: Option<DiscriminatorParams>,
    pub class_weights: ClassWeights,
}

/// Called after every completed step with the step record and the updated
/// generator.
pub type StepObserver<'a> = dyn FnMut(&StepRecord, &GeneratorParams) + 'a;

/// Endless shuffled pass over `0..n`, reshuffled each epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn check_data(source: &[Sample], target: &[UnlabeledSample]) -> Result<(usize, usize, usize)> {
    let first = source
        .first()
        .ok_or_else(|| TrainError::Data("source dataset is empty".into()))?;
    if target.is_empty() {
        return Err(TrainError::Data("target dataset is empty".into()));
    }
    let (c, h, w) = (first.num_classes, first.height(), first.width());
    for s in source {
        if s.num_classes != c || s.height() != h || s.width() != w {
            return Err(TrainError::Data(format!(
                "source samples disagree: {}x{} with {} classes vs {}x{} with {}",
                h,
                w,
                c,
                s.height(),
                s.width(),
                s.num_classes
            )));
        }
    }
    for t in target {
        if t.image.shape() != first.image.shape() {
            return Err(TrainError::Data(format!(
                "target image shape {:?} differs from source {:?}",
                t.image.shape(),
                first.image.shape()
            )));
        }
    }
    Ok((c, h, w))
}

/// Stacks `[3, H, W]` images into a `[B, 3, H, W]` batch.
pub fn image_batch<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> std::result::Result<Tensor, TensorError> {
    let mut shape = Vec::new();
    let mut data = Vec::new();
    let mut count = 0;
    for img in images {
        if count == 0 {
            shape = img.shape().to_vec();
        } else if img.shape() != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "image_batch",
                left: shape,
                right: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
        count += 1;
    }
    if shape.len() != 3 {
        return Err(TensorError::InvalidShape {
            shape,
            reason: "image_batch expects one or more [C, H, W] images".into(),
        });
    }
    shape.insert(0, count);
    Tensor::new(shape, data)
}

fn finite(step: usize, what: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::Diverged { step, what })
    }
}

/// Runs training on in-memory data. When `out_dir` is given, checkpoints are
/// written there at the configured cadence and on completion.
pub fn train_in_memory(
    cfg: &TrainConfig,
    source: &[Sample],
    target: &[UnlabeledSample],
    out_dir: Option<&Path>,
    observer: &mut StepObserver<'_>,
) -> Result<TrainOutcome> {
    cfg.validate().map_err(TrainError::Config)?;
    let (num_classes, height, width) = check_data(source, target)?;
    let pixels = (height * width) as f64;
    let warmup = cfg.warmup();
    let use_disc = cfg.uses_discriminator();

    let class_weights = if cfg.enable_class_weighting {
        class_frequencies(source, num_classes)?
    } else {
        ClassWeights::ones(num_classes)
    };

    let mut gen = GeneratorParams::init(num_classes, mix_seed(cfg.seed, STREAM_G_INIT));
    let mut disc = use_disc.then(|| DiscriminatorParams::init(num_classes, mix_seed(cfg.seed, STREAM_D_INIT)));
    let mut sgd = Sgd::new(gen.params().tensors(), cfg.momentum, cfg.weight_decay);
    let mut adam = disc
        .as_ref()
        .map(|d| Adam::new(d.params().tensors(), cfg.adam_betas, cfg.adam_epsilon));
    let mut source_order = Sampler::new(source.len(), mix_seed(cfg.seed, STREAM_SOURCE_ORDER));
    let mut target_order = Sampler::new(target.len(), mix_seed(cfg.seed, STREAM_TARGET_ORDER));

    if let Some(dir) = out_dir {
        if cfg.checkpoint_every > 0 {
            let ck = dir.join(CHECKPOINT_DIR);
            fs::create_dir_all(&ck).map_err(io_err(&ck))?;
        }
    }

    let mut log = TrainLog::default();
    for step in 0..cfg.total_steps {
        let started = Instant::now();
        let lr = poly_lr(step, cfg);

        let src_idx = source_order.next_batch(cfg.batch_size);
        let xs = image_batch(src_idx.iter().map(|&i| &source[i].image))?;
        let ys = one_hot_batch(
            &src_idx.iter().map(|&i| &source[i].labels).collect::<Vec<_>>(),
            num_classes,
        )?;

        let mut g = Graph::new();
        let g_vars = gen.bind(&mut g, true);
        let xs_v = g.constant(xs);
        let ps = generator_forward(&mut g, &gen, &g_vars, xs_v)?;
        let ys_v = g.constant(ys.clone());
        let l_g1 = loss_supervised_ce(&mut g, ps, ys_v)?;

        let mut record = StepRecord {
            step,
            lr,
            l_g1: 0.0,
            l_g2_s: 0.0,
            l_g2_t: 0.0,
            l_g3: 0.0,
            l_d: 0.0,
            mask_fraction: 0.0,
            ms: 0.0,
        };
        let mut parts = LossParts {
            l_g1,
            l_g2_s: None,
            l_g2_t: None,
            l_g3: None,
        };

        if let (Some(disc), Some(adam)) = (disc.as_mut(), adam.as_mut()) {
            let tgt_idx = target_order.next_batch(cfg.batch_size);
            let xt = image_batch(tgt_idx.iter().map(|&i| &target[i].image))?;
            let xt_v = g.constant(xt);
            let pt = generator_forward(&mut g, &gen, &g_vars, xt_v)?;

            // D step on detached predictions of both domains vs. source ground truth.
            let fakes = Tensor::stack_batch(&[g.value(ps).clone(), g.value(pt).clone()])?;
            let mut dg = Graph::new();
            let d_vars = disc.bind(&mut dg, true);
            let fake_v = dg.constant(fakes);
            let real_v = dg.constant(ys);
            let d_fake = discriminator_forward(&mut dg, disc, &d_vars, fake_v)?;
            let d_real = discriminator_forward(&mut dg, disc, &d_vars, real_v)?;
            let l_d = loss_discriminator(&mut dg, d_fake, d_real)?;
            record.l_d = finite(step, "l_d", dg.value(l_d).item())?;
            dg.backward(l_d)?;
            let grads = d_vars.grads(&dg);
            drop(dg);
            adam.step(disc.params_mut().tensors_mut(), &grads, lr)?;

            // G-side terms against the updated, frozen D.
            let frozen = disc.bind(&mut g, false);
            let confidence_t = if cfg.enable_adv {
                let d_s = discriminator_forward(&mut g, disc, &frozen, ps)?;
                let d_t = discriminator_forward(&mut g, disc, &frozen, pt)?;
                let l_s = loss_adversarial(&mut g, d_s)?;
                let l_t = loss_adversarial(&mut g, d_t)?;
                record.l_g2_s = finite(step, "l_g2_s", g.value(l_s).item())?;
                record.l_g2_t = finite(step, "l_g2_t", g.value(l_t).item())?;
                parts.l_g2_s = Some(l_s);
                parts.l_g2_t = Some(l_t);
                g.value(d_t).clone()
            } else {
                let pt_detached = g.detach(pt);
                let d_t = discriminator_forward(&mut g, disc, &frozen, pt_detached)?;
                g.value(d_t).clone()
            };

            if cfg.enable_self_teach {
                let reliability = batch_reliability(g.value(pt), &confidence_t, &cfg.mask, cfg.reliability_mode())?;
                record.mask_fraction = reliability.selected_fraction;
                if step >= warmup {
                    let l_g3 = loss_self_teach(&mut g, pt, &reliability.weights, &class_weights)?;
                    record.l_g3 = finite(step, "l_g3", g.value(l_g3).item())?;
                    parts.l_g3 = Some(l_g3);
                }
            }
        }

        record.l_g1 = finite(step, "l_g1", g.value(l_g1).item())?;
        let total = loss_full(&mut g, &parts, &cfg.loss_weights, step, warmup)?;
        let total = g.scale(total, cfg.loss_scale / pixels);
        g.backward(total)?;
        let grads = g_vars.grads(&g);
        drop(g);
        sgd.step(gen.params_mut().tensors_mut(), &grads, lr)?;

        if cfg.log_wall_time {
            record.ms = started.elapsed().as_secs_f64() * 1e3;
        }
        observer(&record, &gen);
        log.records.push(record);

        let done = step + 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
                let path = dir.join(CHECKPOINT_DIR).join(format!("step_{done:06}.udac"));
                Checkpoint::from_networks(&gen, disc.as_ref(), done).write(&path)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        Checkpoint::from_networks(&gen, disc.as_ref(), cfg.total_steps).write(&dir.join(FINAL_CHECKPOINT))?;
    }

    Ok(TrainOutcome {
        log,
        generator: gen,
        discriminator: disc,
        class_weights,
    })
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub final_checkpoint: PathBuf,
    pub log_csv: PathBuf,
    pub log_jsonl: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles {
            final_checkpoint: dir.join(FINAL_CHECKPOINT),
            log_csv: dir.join(LOG_CSV),
            log_jsonl: dir.join(LOG_JSONL),
        }
    }
}

/// Loads the source split with labels and the target split without them,
/// trains, and writes checkpoints, logs and class weights to `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    source_dir: &Path,
    target_dir: &Path,
    out_dir: &Path,
    observer: &mut StepObserver<'_>,
) -> Result<TrainOutcome> {
    cfg.validate().map_err(TrainError::Config)?;
    let source = load_labeled(source_dir)?;
    let target = load_unlabeled(target_dir)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let outcome = train_in_memory(cfg, &source, &target, Some(out_dir), observer)?;
    let files = RunFiles::in_dir(out_dir);
    outcome
        .log
        .write(&files.log_csv, &files.log_jsonl)
        .map_err(io_err(out_dir))?;
    let weights_path = out_dir.join(CLASS_WEIGHTS_FILE);
    let json = serde_json::to_string_pretty(outcome.class_weights.weights()).expect("weights serialize");
    fs::write(&weights_path, json + "\n").map_err(io_err(&weights_path))?;
    Ok(outcome)
}
