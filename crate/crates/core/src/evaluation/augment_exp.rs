use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{accuracy, train_classifier, write_text, ClassifierConfig, EvalError, SampleBank};
use crate::data::{augment, AugmentPolicy, LabeledDataset, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentArm {
    pub label: String,
    pub n_train: usize,
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    /// Accuracy minus the real-only arm.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub n_real_per_class: usize,
    pub n_synth_per_class: usize,
    pub arms: Vec<AugmentArm>,
}

impl AugmentReport {
    pub fn arm(&self, label: &str) -> Option<&AugmentArm> {
        self.arms.iter().find(|a| a.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["arm", "n_train", "accuracy", "delta"]).expect("in-memory");
        for a in &self.arms {
            w.write_record([
                a.label.clone(),
                a.n_train.to_string(),
                format!("{:.4}", a.accuracy),
                format!("{:+.4}", a.delta),
            ])
            .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8")
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        write_text(&dir.join("augment_report.csv"), &self.to_csv())?;
        write_text(
            &dir.join("augment_report.json"),
            &serde_json::to_string_pretty(self).expect("report serializes"),
        )
    }
}

pub const REAL_ONLY: &str = "real";
pub const STANDARD_AUG: &str = "real+standard_aug";

/// Classifier accuracy on real validation for: `n_real` real images per
/// class; the same plus `n_synth` images per class from each bank; the same
/// plus `n_synth` standard-augmented copies per class of the real subset.
pub fn augmentation_experiment(
    real_train: &LabeledDataset,
    real_val: &LabeledDataset,
    banks: &[(&str, &SampleBank)],
    n_real: usize,
    n_synth: usize,
    policy: &AugmentPolicy,
    cfg: &ClassifierConfig,
) -> Result<AugmentReport, EvalError> {
    cfg.validate()?;
    policy.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    let res = cfg.input_resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa06);
    let mut idx = Vec::new();
    for c in 0..real_train.n_classes() {
        idx.extend(real_train.sample_class(c, n_real, &mut rng).map_err(|e| match e {
            crate::data::DataError::TooFewItems { class, have, need } => EvalError::TooFew { class, have, need },
            other => other.into(),
        })?);
    }
    let real = real_train.subset(&idx).resized(res);

    let mut sets: Vec<(String, LabeledDataset)> = vec![(REAL_ONLY.into(), real.clone())];
    for (name, bank) in banks {
        bank.validate(real_train.class_names())?;
        if bank.resolution != res {
            return Err(EvalError::Data(format!("bank '{name}' is {}px, classifier wants {res}px", bank.resolution)));
        }
        let mut set = real.clone();
        for c in 0..bank.images.n_classes() {
            let pick = bank.images.sample_class(c, n_synth, &mut rng).map_err(|e| match e {
                crate::data::DataError::TooFewItems { class, have, need } => EvalError::TooFew { class, have, need },
                other => other.into(),
            })?;
            set.extend(&bank.images.subset(&pick));
        }
        sets.push((format!("real+{name}"), set));
    }
    let mut set = real.clone();
    for c in 0..real.n_classes() {
        let members = real.indices_of_class(c);
        for _ in 0..n_synth {
            let i = members[rng.random_range(0..members.len())];
            let (img, label) = augment(&real.images()[i], real.labels()[i], policy, &mut rng);
            set.push(img, label, Provenance::Augmented);
        }
    }
    sets.push((STANDARD_AUG.into(), set));

    let mut arms: Vec<AugmentArm> = Vec::new();
    for (label, set) in sets {
        let model = train_classifier(&set, real_val, cfg)?;
        let acc = accuracy(&model, real_val);
        let base = arms.first().map_or(acc.overall, |a| a.accuracy);
        arms.push(AugmentArm {
            label,
            n_train: set.len(),
            accuracy: acc.overall,
            per_class: acc.per_class,
            delta: acc.overall - base,
        });
    }
    Ok(AugmentReport {
        n_real_per_class: n_real,
        n_synth_per_class: n_synth,
        arms,
    })
}
