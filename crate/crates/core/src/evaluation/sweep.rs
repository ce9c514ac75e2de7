use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{evaluate_bank, write_text, ClassifierConfig, EvalError, EvalReport, EvalSplits, RealReference, SampleBank};
use crate::data::AugmentPolicy;
use crate::networks::NetworkSpec;
use crate::train::{train, Checkpoint, ImageSource, TrainConfig, TrainOptions, Trainer, FINAL_CHECKPOINT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    /// One arm per resolution with a single attention block there, plus an
    /// arm without attention.
    pub stages: Vec<u32>,
    /// The last this-many checkpoints of each arm are scored; the best
    /// GAN-train result is reported.
    pub checkpoints_to_evaluate: usize,
    pub bank_per_class: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            stages: vec![8, 16],
            checkpoints_to_evaluate: 3,
            bank_per_class: 100,
        }
    }
}

impl SweepSettings {
    pub fn validate(&self, final_resolution: u32) -> Result<(), EvalError> {
        let mut bad = Vec::new();
        for &r in &self.stages {
            if !r.is_power_of_two() || r < 4 || r > final_resolution {
                bad.push(format!("stage {r} is not a resolution in 4..={final_resolution}"));
            }
        }
        if self.checkpoints_to_evaluate == 0 {
            bad.push("checkpoints_to_evaluate must be >= 1".into());
        }
        if self.bank_per_class < 10 {
            bad.push("bank_per_class must be >= 10 so every class survives the selection split".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Config(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    pub step: u64,
    pub path: PathBuf,
    pub gan_train: f64,
    pub gan_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepArm {
    pub label: String,
    pub attention: Vec<u32>,
    pub scored: Vec<CheckpointScore>,
    /// Report of the checkpoint with the best GAN-train accuracy.
    pub best: EvalReport,
    pub best_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Real-trained classifier on real validation.
    pub reals: f64,
    pub arms: Vec<SweepArm>,
}

impl SweepReport {
    /// One row per metric, one column per arm, reals first.
    pub fn to_table_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string(), "Reals".to_string()];
        header.extend(self.arms.iter().map(|a| a.label.clone()));
        w.write_record(&header).expect("in-memory");
        for (name, get) in [
            ("GAN-train", (|r: &EvalReport| r.gan_train) as fn(&EvalReport) -> f64),
            ("GAN-test", |r: &EvalReport| r.gan_test),
        ] {
            let mut row = vec![name.to_string(), format!("{:.4}", self.reals)];
            row.extend(self.arms.iter().map(|a| format!("{:.4}", get(&a.best))));
            w.write_record(&row).expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        write_text(&dir.join("sweep_table.csv"), &self.to_table_csv())?;
        write_text(
            &dir.join("sweep_report.json"),
            &serde_json::to_string_pretty(self).expect("report serializes"),
        )
    }

    pub fn arm(&self, label: &str) -> Option<&SweepArm> {
        self.arms.iter().find(|a| a.label == label)
    }
}

pub fn arm_label(attention: &[u32]) -> String {
    match attention {
        [] => "PGAN".into(),
        rs => format!("Stage {}", rs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("+")),
    }
}

fn arm_dir(out_dir: &Path, attention: &[u32]) -> PathBuf {
    match attention {
        [] => out_dir.join("pgan"),
        rs => out_dir.join(format!("stage_{}", rs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("_"))),
    }
}

/// Trains the arm's GAN into `dir` unless a finished run with the same
/// network and config is already there.
fn train_arm(
    dir: &Path,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    splits: &EvalSplits,
    policy: Option<&AugmentPolicy>,
) -> Result<(), EvalError> {
    let done = dir.join(FINAL_CHECKPOINT);
    if let Ok(ck) = Checkpoint::load(&done) {
        if ck.spec == *spec && ck.config == *cfg && ck.schedule.images_shown >= cfg.total_images {
            info!("reusing finished run in {}", dir.display());
            return Ok(());
        }
    }
    let mut src = ImageSource::new(splits.train.clone(), cfg.final_resolution, policy.cloned())?;
    let mut trainer = Trainer::new(spec.clone(), cfg.clone())?;
    train(
        &mut trainer,
        &mut src,
        &TrainOptions {
            out_dir: Some(dir.to_path_buf()),
            max_steps: None,
        },
    )?;
    Ok(())
}

/// Checkpoints in `dir` ordered by step, one per step, last `k` kept.
pub fn latest_checkpoints(dir: &Path, k: usize) -> Result<Vec<(u64, PathBuf)>, EvalError> {
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    let mut paths = vec![dir.join(FINAL_CHECKPOINT)];
    if let Ok(rd) = std::fs::read_dir(dir.join("checkpoints")) {
        paths.extend(rd.filter_map(|e| e.ok()).map(|e| e.path()));
    }
    for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "ckpt")) {
        let ck = match Checkpoint::load(&p) {
            Ok(ck) => ck,
            Err(_) if !p.exists() => continue,
            Err(e) => return Err(crate::train::TrainError::from(e).into()),
        };
        if !found.iter().any(|(s, _)| *s == ck.step) {
            found.push((ck.step, p));
        }
    }
    found.sort();
    let skip = found.len().saturating_sub(k);
    Ok(found.split_off(skip))
}

/// Trains one GAN per attention placement (plus the no-attention baseline)
/// on the real training split and scores each with GAN-train / GAN-test.
#[allow(clippy::too_many_arguments)]
pub fn placement_sweep(
    base: &NetworkSpec,
    train_cfg: &TrainConfig,
    splits: &EvalSplits,
    gan_policy: Option<&AugmentPolicy>,
    settings: &SweepSettings,
    classifier: &ClassifierConfig,
    out_dir: &Path,
    config_hash: &str,
) -> Result<SweepReport, EvalError> {
    settings.validate(base.final_resolution())?;
    classifier.validate()?;
    let reference = RealReference::train(&splits.train, &splits.val, classifier)?;
    info!("real reference accuracy {:.4}", reference.val.overall);
    let placements: Vec<Vec<u32>> = std::iter::once(vec![]).chain(settings.stages.iter().map(|&r| vec![r])).collect();
    let mut arms = Vec::new();
    for attention in placements {
        let spec = base.clone().with_attention(&attention)?;
        let dir = arm_dir(out_dir, &attention);
        let label = arm_label(&attention);
        info!("sweep arm {label}: {}", spec.summary());
        train_arm(&dir, &spec, train_cfg, splits, gan_policy)?;
        let mut scored = Vec::new();
        let mut best: Option<(EvalReport, u64)> = None;
        for (step, path) in latest_checkpoints(&dir, settings.checkpoints_to_evaluate)? {
            let ck = Checkpoint::load(&path).map_err(crate::train::TrainError::from)?;
            let trainer = Trainer::from_checkpoint(ck)?;
            let bank = SampleBank::from_generator(
                trainer.generator(),
                trainer.generator_params(),
                splits.val.class_names(),
                settings.bank_per_class,
                classifier.input_resolution,
                classifier.seed,
            )?;
            let report = evaluate_bank(&bank, &reference, splits, classifier, false, config_hash)?;
            info!("{label} step {step}: GAN-train {:.4} GAN-test {:.4}", report.gan_train, report.gan_test);
            scored.push(CheckpointScore {
                step,
                path: path.clone(),
                gan_train: report.gan_train,
                gan_test: report.gan_test,
            });
            if best.as_ref().is_none_or(|(b, _)| report.gan_train > b.gan_train) {
                best = Some((report, step));
            }
        }
        let (best, best_step) = best.ok_or_else(|| EvalError::Data(format!("no checkpoints in {}", dir.display())))?;
        arms.push(SweepArm {
            label,
            attention,
            scored,
            best,
            best_step,
        });
    }
    let report = SweepReport {
        reals: reference.val.overall,
        arms,
    };
    report.write(out_dir)?;
    Ok(report)
}
