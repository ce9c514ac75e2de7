//! WGAN-GP training with two-timescale learning rates, the progressive
//! resolution schedule and checkpointing.

mod checkpoint;
mod config;
mod loss;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, OptimizerState, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{
    desk_batch_map, paper_batch_map, ConfigError, FieldProblem, TrainConfig, DESK_BATCH_DIVISOR, DESK_BATCH_FLOOR,
    PAPER_BATCH_MAP,
};
pub use loss::{d_loss, g_loss, gradient_penalty, gradient_penalty_at, Penalty, GP_NORM_EPS};
pub use optim::{Adam, AdamHyper, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{schedule_at, ScheduleState};

use crate::autograd::{grad, Var};
use crate::data::{augment, AugmentPolicy, LabeledDataset};
use crate::networks::{Discriminator, Generator, NetworkError, NetworkSpec, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what}{}{}",
        .step.map(|s| format!(" at step {s}")).unwrap_or_default(),
        .last_checkpoint.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    NonFinite {
        what: String,
        step: Option<u64>,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("checkpoint does not match this run: {0}")]
    Mismatch(String),
    #[error("dataset problem: {0}")]
    Data(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics log error: {0}")]
    Csv(#[from] csv::Error),
}

/// Supplies real minibatches in the generator's `[-1, 1]` convention.
pub trait BatchSource {
    fn n_classes(&self) -> usize;
    /// `[N,3,r,r]` images and their labels.
    fn sample(&mut self, n: usize, resolution: u32, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<usize>), TrainError>;
    /// Labels drawn from the data's class distribution.
    fn sample_labels(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize>;
}

/// Uniform sampling with replacement from a labeled dataset whose images are
/// at the final training resolution. Lower resolutions are 2x2 box-filtered.
/// With a policy set, each drawn image is augmented on the fly.
pub struct ImageSource {
    dataset: LabeledDataset,
    resolution: u32,
    policy: Option<AugmentPolicy>,
    pyramid: BTreeMap<u32, Vec<f32>>,
    warned: bool,
}

impl ImageSource {
    pub fn new(dataset: LabeledDataset, resolution: u32, policy: Option<AugmentPolicy>) -> Result<Self, TrainError> {
        if dataset.is_empty() {
            return Err(TrainError::Data("dataset is empty".into()));
        }
        if let Some(c) = dataset.class_histogram().iter().position(|&n| n == 0) {
            return Err(TrainError::Data(format!(
                "class '{}' has no samples",
                dataset.class_names()[c]
            )));
        }
        if let Some(p) = &policy {
            p.validate().map_err(|e| TrainError::Data(e.to_string()))?;
        }
        let r = resolution as usize;
        let dataset = dataset.resized(r);
        Ok(ImageSource {
            dataset,
            resolution,
            policy,
            pyramid: BTreeMap::new(),
            warned: false,
        })
    }

    pub fn dataset(&self) -> &LabeledDataset {
        &self.dataset
    }

    fn level(&mut self, resolution: u32) -> &[f32] {
        let (base, ds) = (self.resolution, &self.dataset);
        self.pyramid.entry(resolution).or_insert_with(|| {
            let all: Vec<Tensor<f32>> = ds.images().iter().map(|im| im.to_gan_tensor::<f32>()).collect();
            let mut out = Vec::new();
            for t in all {
                let mut t = t.reshape(&[1, 3, base as usize, base as usize]);
                let mut r = base;
                while r > resolution {
                    t = t.downsample2x();
                    r /= 2;
                }
                out.extend_from_slice(t.data());
            }
            out
        })
    }
}

impl BatchSource for ImageSource {
    fn n_classes(&self) -> usize {
        self.dataset.n_classes()
    }

    fn sample(&mut self, n: usize, resolution: u32, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<usize>), TrainError> {
        if resolution > self.resolution {
            return Err(TrainError::Data(format!(
                "requested {resolution}x{resolution} batches from {0}x{0} data",
                self.resolution
            )));
        }
        if n > self.dataset.len() && !self.warned {
            warn!(
                "dataset of {} images is smaller than the batch of {n}; sampling with replacement",
                self.dataset.len()
            );
            self.warned = true;
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.dataset.len())).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| self.dataset.labels()[i]).collect();
        let r = resolution as usize;
        let per = 3 * r * r;
        let mut data = Vec::with_capacity(n * per);
        if let Some(policy) = self.policy.clone() {
            for &i in &idx {
                let (im, _) = augment(&self.dataset.images()[i], self.dataset.labels()[i], &policy, rng);
                let b = self.resolution as usize;
                let mut t = im.to_gan_tensor::<f32>().reshape(&[1, 3, b, b]);
                while t.shape()[2] > r {
                    t = t.downsample2x();
                }
                data.extend_from_slice(t.data());
            }
        } else {
            let level = self.level(resolution);
            for &i in &idx {
                data.extend_from_slice(&level[i * per..(i + 1) * per]);
            }
        }
        Ok((Tensor::new(vec![n, 3, r, r], data), labels))
    }

    fn sample_labels(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n)
            .map(|_| self.dataset.labels()[rng.random_range(0..self.dataset.len())])
            .collect()
    }
}

/// One row of the metrics log. The first eight columns are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub images_shown: u64,
    pub stage: usize,
    pub alpha: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub gp: f64,
    pub wall_time: f64,
    pub resolution: u32,
    pub batch_size: usize,
    pub grad_norm_d: f64,
    pub grad_norm_g: f64,
}

impl StepMetrics {
    /// Largest absolute difference over the numeric columns except wall time.
    pub fn max_deviation(&self, other: &StepMetrics) -> f64 {
        let a = [self.alpha, self.d_loss, self.g_loss, self.gp, self.grad_norm_d, self.grad_norm_g];
        let b = [other.alpha, other.d_loss, other.g_loss, other.gp, other.grad_norm_d, other.grad_norm_g];
        let discrete = (self.step, self.images_shown, self.stage, self.resolution, self.batch_size)
            != (other.step, other.images_shown, other.stage, other.resolution, other.batch_size);
        if discrete {
            return f64::INFINITY;
        }
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

fn l2(ts: &[Tensor<f32>]) -> f64 {
    ts.iter()
        .flat_map(|t| t.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Owns both networks, their optimizers, the schedule position and the
/// single random stream that drives sampling.
pub struct Trainer {
    spec: NetworkSpec,
    cfg: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    g: ParamSet<f32>,
    d: ParamSet<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    step: u64,
    images_shown: u64,
    rng: ChaCha8Rng,
    wall_offset: f64,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(spec: NetworkSpec, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Self::check_spec(&spec, &cfg)?;
        let generator = Generator::new(&spec)?;
        let discriminator = Discriminator::new(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let g = generator.layout().init::<f32>(&mut rng);
        let d = discriminator.layout().init::<f32>(&mut rng);
        let (lr_d, lr_g) = cfg.effective_lrs();
        let opt_g = Adam::new(AdamHyper::new(lr_g), &g);
        let opt_d = Adam::new(AdamHyper::new(lr_d), &d);
        Ok(Trainer {
            spec,
            cfg,
            generator,
            discriminator,
            g,
            d,
            opt_g,
            opt_d,
            step: 0,
            images_shown: 0,
            rng,
            wall_offset: 0.0,
            last_checkpoint: None,
        })
    }

    fn check_spec(spec: &NetworkSpec, cfg: &TrainConfig) -> Result<(), TrainError> {
        if spec.final_resolution() != cfg.final_resolution {
            return Err(TrainError::Mismatch(format!(
                "network ends at {0}x{0} but the schedule ends at {1}x{1}",
                spec.final_resolution(),
                cfg.final_resolution
            )));
        }
        Ok(())
    }

    /// Restores a run. Refuses checkpoints whose stored schedule position is
    /// not what the stored config implies, or whose tensors do not fit.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, TrainError> {
        ck.config.validate()?;
        Self::check_spec(&ck.spec, &ck.config)?;
        let expect = schedule_at(&ck.config, ck.schedule.images_shown);
        if expect != ck.schedule {
            return Err(TrainError::Mismatch(format!(
                "stored schedule {:?} differs from the config's {:?}",
                ck.schedule, expect
            )));
        }
        let generator = Generator::new(&ck.spec)?;
        let discriminator = Discriminator::new(&ck.spec)?;
        generator.layout().check(&ck.generator)?;
        discriminator.layout().check(&ck.discriminator)?;
        for (opt, params) in [(&ck.opt_g, &ck.generator), (&ck.opt_d, &ck.discriminator)] {
            let fits = |ms: &[Tensor<f32>]| {
                ms.len() == params.len() && ms.iter().zip(params.tensors()).all(|(m, p)| m.shape() == p.shape())
            };
            if !fits(&opt.m) || !fits(&opt.v) {
                return Err(TrainError::Mismatch("optimizer moments do not fit the parameters".into()));
            }
        }
        let (lr_d, lr_g) = ck.config.effective_lrs();
        if ck.opt_d.hyper.lr != lr_d || ck.opt_g.hyper.lr != lr_g {
            return Err(TrainError::Mismatch("optimizer learning rates differ from the config".into()));
        }
        Ok(Trainer {
            rng: ck.rng.restore()?,
            opt_g: ck.opt_g.restore(),
            opt_d: ck.opt_d.restore(),
            generator,
            discriminator,
            g: ck.generator,
            d: ck.discriminator,
            step: ck.step,
            images_shown: ck.schedule.images_shown,
            spec: ck.spec,
            cfg: ck.config,
            wall_offset: 0.0,
            last_checkpoint: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            config: self.cfg.clone(),
            step: self.step,
            schedule: self.schedule(),
            rng: RngState::capture(&self.rng),
            generator: self.g.clone(),
            discriminator: self.d.clone(),
            opt_g: OptimizerState::capture(&self.opt_g),
            opt_d: OptimizerState::capture(&self.opt_d),
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn generator_params(&self) -> &ParamSet<f32> {
        &self.g
    }

    pub fn discriminator_params(&self) -> &ParamSet<f32> {
        &self.d
    }

    /// `(lr_d, lr_g)` as held by the two optimizers.
    pub fn optimizer_lrs(&self) -> (f64, f64) {
        (self.opt_d.lr(), self.opt_g.lr())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn images_shown(&self) -> u64 {
        self.images_shown
    }

    pub fn schedule(&self) -> ScheduleState {
        schedule_at(&self.cfg, self.images_shown)
    }

    pub fn is_done(&self) -> bool {
        self.images_shown >= self.cfg.total_images
    }

    fn latent(&mut self, n: usize) -> Var<f32> {
        let z = (0..n * self.spec.latent_dim)
            .map(|_| self.rng.sample::<f32, _>(StandardNormal))
            .collect();
        Var::constant(Tensor::new(vec![n, self.spec.latent_dim], z))
    }

    fn non_finite(&self, what: &str) -> TrainError {
        TrainError::NonFinite {
            what: what.to_string(),
            step: Some(self.step),
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    /// `d_g_step_ratio` critic updates, then one generator update.
    pub fn train_step(&mut self, data: &mut dyn BatchSource) -> Result<StepMetrics, TrainError> {
        let t0 = Instant::now();
        if data.n_classes() != self.spec.n_classes {
            return Err(TrainError::Data(format!(
                "data has {} classes, network expects {}",
                data.n_classes(),
                self.spec.n_classes
            )));
        }
        let sched = self.schedule();
        let fade = sched.fade();
        let bs = sched.batch_size;
        let (mut d_total, mut gp_total, mut gn_d) = (0.0, 0.0, 0.0);
        for _ in 0..self.cfg.d_g_step_ratio {
            let (real, labels) = data.sample(bs, sched.resolution, &mut self.rng)?;
            let z = self.latent(bs);
            let fake = self
                .generator
                .forward(&self.g.bind_const(), &z, &labels, fade)?
                .value()
                .clone();
            let dp = self.d.bind();
            let real_s = self.discriminator.forward(&dp, &Var::constant(real.clone()), &labels, fade)?;
            let fake_s = self.discriminator.forward(&dp, &Var::constant(fake.clone()), &labels, fade)?;
            let critic = |x: &Var<f32>| {
                self.discriminator
                    .forward(&dp, x, &labels, fade)
                    .expect("shapes already validated")
            };
            let gp = gradient_penalty(&critic, &real, &fake, &mut self.rng).map_err(|e| match e {
                TrainError::NonFinite { what, .. } => self.non_finite(&what),
                other => other,
            })?;
            let loss = d_loss(&real_s, &fake_s, &gp.value, self.cfg.gp_weight, self.cfg.drift_weight);
            let lv = loss.value().item() as f64;
            if !lv.is_finite() {
                return Err(self.non_finite("discriminator loss"));
            }
            let grads: Vec<Tensor<f32>> = grad(&loss, &dp, false).iter().map(|g| g.value().clone()).collect();
            if !grads.iter().all(Tensor::all_finite) {
                return Err(self.non_finite("discriminator gradient"));
            }
            gn_d = l2(&grads);
            self.opt_d.step(&mut self.d, &grads);
            d_total += lv;
            gp_total += gp.value.value().item() as f64;
            self.images_shown += bs as u64;
        }
        let k = self.cfg.d_g_step_ratio as f64;
        let labels = data.sample_labels(bs, &mut self.rng);
        let z = self.latent(bs);
        let gp_vars = self.g.bind();
        let fake = self.generator.forward(&gp_vars, &z, &labels, fade)?;
        let scores = self.discriminator.forward(&self.d.bind_const(), &fake, &labels, fade)?;
        let loss = g_loss(&scores);
        let gl = loss.value().item() as f64;
        if !gl.is_finite() {
            return Err(self.non_finite("generator loss"));
        }
        let grads: Vec<Tensor<f32>> = grad(&loss, &gp_vars, false).iter().map(|g| g.value().clone()).collect();
        if !grads.iter().all(Tensor::all_finite) {
            return Err(self.non_finite("generator gradient"));
        }
        let gn_g = l2(&grads);
        self.opt_g.step(&mut self.g, &grads);
        self.step += 1;
        self.wall_offset += t0.elapsed().as_secs_f64();
        Ok(StepMetrics {
            step: self.step,
            images_shown: self.images_shown,
            stage: sched.stage_index,
            alpha: sched.alpha,
            d_loss: d_total / k,
            g_loss: gl,
            gp: gp_total / k,
            wall_time: self.wall_offset,
            resolution: sched.resolution,
            batch_size: bs,
            grad_norm_d: gn_d,
            grad_norm_g: gn_g,
        })
    }
}

/// Where and how often [`train`] writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints go to `out_dir/checkpoints`, the log to `out_dir/metrics.csv`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many steps in this call even if images remain.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Append-only metrics CSV. On resume, rows past the resumed step are dropped
/// so the log matches the checkpointed trajectory.
pub struct MetricsLog {
    writer: csv::Writer<fs::File>,
}

impl MetricsLog {
    pub fn open(path: &Path, resume_step: u64) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut keep = Vec::new();
        if resume_step > 0 && path.exists() {
            let mut r = csv::Reader::from_path(path)?;
            for row in r.deserialize::<StepMetrics>() {
                let row = row?;
                if row.step <= resume_step {
                    keep.push(row);
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let file = fs::File::create(path).map_err(io)?;
        let mut writer = csv::Writer::from_writer(file);
        for row in &keep {
            writer.serialize(row)?;
        }
        writer.flush().map_err(io)?;
        Ok(MetricsLog { writer })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<(), TrainError> {
        self.writer.serialize(m)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.writer.flush().map_err(|source| TrainError::Io {
            path: PathBuf::from(METRICS_FILE),
            source,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

/// Runs steps until `total_images` have been shown (or `max_steps`),
/// checkpointing every `checkpoint_every` steps and at the end.
pub fn train(trainer: &mut Trainer, data: &mut dyn BatchSource, opts: &TrainOptions) -> Result<TrainOutcome, TrainError> {
    let mut log = match &opts.out_dir {
        Some(dir) => Some(MetricsLog::open(&dir.join(METRICS_FILE), trainer.step)?),
        None => None,
    };
    let mut metrics = Vec::new();
    let mut taken = 0;
    while !trainer.is_done() && opts.max_steps.is_none_or(|m| taken < m) {
        let m = trainer.train_step(data)?;
        taken += 1;
        if let Some(log) = &mut log {
            log.append(&m)?;
        }
        if m.step % 100 == 0 {
            info!(
                "step {} images {} stage {} alpha {:.3} d_loss {:.4} g_loss {:.4}",
                m.step, m.images_shown, m.stage, m.alpha, m.d_loss, m.g_loss
            );
        }
        metrics.push(m);
        if let (Some(dir), true) = (&opts.out_dir, trainer.cfg.checkpoint_every > 0) {
            if trainer.step.is_multiple_of(trainer.cfg.checkpoint_every) {
                let path = checkpoint_path(dir, trainer.step);
                trainer.checkpoint().save(&path)?;
                trainer.last_checkpoint = Some(path);
                if let Some(log) = &mut log {
                    log.flush()?;
                }
            }
        }
    }
    let mut final_checkpoint = None;
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        trainer.checkpoint().save(&path)?;
        final_checkpoint = Some(path);
        if let Some(log) = &mut log {
            log.flush()?;
        }
    }
    Ok(TrainOutcome {
        metrics,
        final_checkpoint,
    })
}
