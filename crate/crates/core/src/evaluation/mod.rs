//! Classifier-based GAN evaluation (GAN-train / GAN-test), the attention
//! placement sweep and the augmentation experiment.

mod augment_exp;
mod classifier;
mod grid;
mod sweep;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment_exp::{augmentation_experiment, AugmentArm, AugmentReport};
pub use classifier::{
    accuracy, train_classifier, Accuracy, Architecture, Classifier, ClassifierConfig, ConstantClassifier,
    TrainedClassifier,
};
pub use grid::{emit_sample_grid, grid_dimensions, GLYPH_HEIGHT, LABEL_GUTTER};
pub use sweep::{placement_sweep, SweepArm, SweepReport, SweepSettings};

use crate::data::{resize_area, split_stratified, DataError, Image, LabeledDataset, Provenance};
use crate::networks::{FadeState, Generator, LatentCode, NetworkError, ParamSet};
use crate::tensor::Tensor;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("class '{0}' is missing")]
    MissingClass(String),
    #[error("class '{class}' has {have} items, need {need}")]
    TooFew { class: String, have: usize, need: usize },
    #[error("evaluation data problem: {0}")]
    Data(String),
    #[error("isolation violated: {0}")]
    Isolation(String),
    #[error(transparent)]
    Dataset(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
}

/// Real data partitioned for evaluation: an imbalanced training split, a
/// class-balanced validation split, and a held-out pool that only the replay
/// stub may draw from.
#[derive(Debug, Clone)]
pub struct EvalSplits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub held_out: LabeledDataset,
}

impl EvalSplits {
    /// Takes `val_per_class` then `held_out_per_class` items of every class at
    /// random; the rest is the training split. Each class must keep at least
    /// one training item.
    pub fn new(ds: &LabeledDataset, val_per_class: usize, held_out_per_class: usize, seed: u64) -> Result<Self, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let need = val_per_class + held_out_per_class + 1;
        let (mut tr, mut va, mut ho) = (Vec::new(), Vec::new(), Vec::new());
        for c in 0..ds.n_classes() {
            let have = ds.indices_of_class(c).len();
            if have < need {
                return Err(EvalError::TooFew {
                    class: ds.class_names()[c].clone(),
                    have,
                    need,
                });
            }
            let mut idx = ds.sample_class(c, have, &mut rng)?;
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            va.extend_from_slice(&idx[..val_per_class]);
            ho.extend_from_slice(&idx[val_per_class..val_per_class + held_out_per_class]);
            tr.extend_from_slice(&idx[val_per_class + held_out_per_class..]);
        }
        for v in [&mut tr, &mut va, &mut ho] {
            v.sort_unstable();
        }
        Ok(EvalSplits {
            train: ds.subset(&tr).with_provenance(Provenance::RealTrain),
            val: ds.subset(&va).with_provenance(Provenance::RealVal),
            held_out: ds.subset(&ho).with_provenance(Provenance::RealHeldOut),
        })
    }
}

/// Harness stand-ins for a trained generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubKind {
    /// Emits held-out real images: an ideal generator.
    Replay,
    /// Emits uniform noise with class labels unrelated to content.
    Noise,
}

/// Generated (or stub) images grouped by class at classifier resolution.
#[derive(Debug, Clone)]
pub struct SampleBank {
    pub images: LabeledDataset,
    pub per_class: usize,
    pub resolution: usize,
    pub source: String,
}

impl SampleBank {
    /// `per_class` samples of every class from the generator's final stage.
    pub fn from_generator(
        generator: &Generator,
        params: &ParamSet<f32>,
        class_names: &[String],
        per_class: usize,
        resolution: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        let spec = generator.spec();
        if class_names.len() != spec.n_classes {
            return Err(EvalError::Data(format!(
                "{} class names for a {}-class generator",
                class_names.len(),
                spec.n_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fade = FadeState::stable(spec.stages.len() - 1);
        let mut images = LabeledDataset::new(class_names.to_vec());
        for c in 0..spec.n_classes {
            let mut left = per_class;
            while left > 0 {
                let n = left.min(64);
                let codes: Vec<LatentCode> = (0..n).map(|_| LatentCode::sample(spec.latent_dim, c, &mut rng)).collect();
                let out = generator.generate(params, &codes, fade)?;
                let r = spec.final_resolution() as usize;
                let per = 3 * r * r;
                for i in 0..n {
                    let t = Tensor::new(vec![3, r, r], out.data()[i * per..(i + 1) * per].to_vec());
                    let im = Image::from_gan_tensor(&t);
                    let im = if r == resolution { im } else { resize_area(&im, resolution) };
                    images.push(im, c, Provenance::Generated);
                }
                left -= n;
            }
        }
        Ok(SampleBank {
            images,
            per_class,
            resolution,
            source: "generator".into(),
        })
    }

    /// Held-out real images, `per_class` of each class without replacement.
    pub fn replay(held_out: &LabeledDataset, per_class: usize, resolution: usize, seed: u64) -> Result<Self, EvalError> {
        if let Some(p) = held_out.provenance().iter().find(|p| **p != Provenance::RealHeldOut) {
            return Err(EvalError::Isolation(format!("replay pool contains {p:?} images")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = Vec::new();
        for c in 0..held_out.n_classes() {
            idx.extend(held_out.sample_class(c, per_class, &mut rng).map_err(|e| match e {
                DataError::TooFewItems { class, have, need } => EvalError::TooFew { class, have, need },
                other => other.into(),
            })?);
        }
        Ok(SampleBank {
            images: held_out.subset(&idx).resized(resolution),
            per_class,
            resolution,
            source: "replay".into(),
        })
    }

    /// Uniform noise images; labels are balanced and carry no signal.
    pub fn noise(class_names: &[String], per_class: usize, resolution: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = LabeledDataset::new(class_names.to_vec());
        for c in 0..class_names.len() {
            for _ in 0..per_class {
                let data = (0..resolution * resolution * 3).map(|_| rng.random::<f32>()).collect();
                images.push(Image::new(resolution, resolution, data), c, Provenance::Noise);
            }
        }
        SampleBank {
            images,
            per_class,
            resolution,
            source: "noise".into(),
        }
    }

    pub fn stub(kind: StubKind, splits: &EvalSplits, per_class: usize, resolution: usize, seed: u64) -> Result<Self, EvalError> {
        match kind {
            StubKind::Replay => Self::replay(&splits.held_out, per_class, resolution, seed),
            StubKind::Noise => Ok(Self::noise(splits.val.class_names(), per_class, resolution, seed)),
        }
    }

    /// Writes `root/<class>/<index>.png`.
    pub fn save(&self, root: &Path) -> Result<(), EvalError> {
        Ok(crate::data::save_image_folder(&self.images, root)?)
    }

    /// Reads a bank written by [`SampleBank::save`] (or any class-folder tree
    /// of synthetic images), resized to `resolution`, with labels mapped onto
    /// `class_names` by folder name.
    pub fn load(root: &Path, resolution: usize, class_names: &[String]) -> Result<Self, EvalError> {
        let (ds, _) = crate::data::load_image_folder(root, Some(resolution))?;
        let mut images = LabeledDataset::new(class_names.to_vec());
        for (im, l) in ds.images().iter().zip(ds.labels()) {
            let name = &ds.class_names()[*l];
            let c = class_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| EvalError::Data(format!("bank folder '{name}' is not a known class")))?;
            images.push(im.clone(), c, Provenance::Generated);
        }
        let per_class = images.class_histogram().into_iter().min().unwrap_or(0);
        Ok(SampleBank {
            images,
            per_class,
            resolution,
            source: root.display().to_string(),
        })
    }

    /// Every class present, every image at the bank resolution.
    pub fn validate(&self, class_names: &[String]) -> Result<(), EvalError> {
        if self.images.is_empty() {
            return Err(EvalError::Data("sample bank is empty".into()));
        }
        if self.images.class_names() != class_names {
            return Err(EvalError::Data("bank class space differs from the real data".into()));
        }
        if let Some(c) = self.images.class_histogram().iter().position(|&n| n == 0) {
            return Err(EvalError::MissingClass(class_names[c].clone()));
        }
        if self
            .images
            .images()
            .iter()
            .any(|im| im.height() != self.resolution || im.width() != self.resolution)
        {
            return Err(EvalError::Data("bank image at the wrong resolution".into()));
        }
        Ok(())
    }
}

const REAL_TAGS: [Provenance; 3] = [Provenance::Real, Provenance::RealTrain, Provenance::RealVal];
const SYNTHETIC_TAGS: [Provenance; 3] = [Provenance::Generated, Provenance::Noise, Provenance::Augmented];

fn assert_disjoint(seen: &BTreeSet<Provenance>, banned: &[Provenance], who: &str) -> Result<(), EvalError> {
    match banned.iter().find(|p| seen.contains(p)) {
        Some(p) => Err(EvalError::Isolation(format!("{who} was fitted on {p:?} images"))),
        None => Ok(()),
    }
}

/// Fraction of the training set held back for best-epoch selection when no
/// separate selection set is given.
pub const SELECTION_FRACTION: f64 = 0.1;

/// Trains on `train` with best-epoch selection on a stratified slice of it.
fn fit_self_selected(train: &LabeledDataset, cfg: &ClassifierConfig) -> Result<TrainedClassifier, EvalError> {
    let (fit, select) = split_stratified(train, SELECTION_FRACTION, cfg.seed)?;
    let mut model = train_classifier(&fit, &select, cfg)?;
    model.seen.extend(select.provenance().iter().copied());
    Ok(model)
}

/// GAN-train: classifier fitted on the bank only, accuracy on real validation.
pub fn gan_train_score(
    bank: &SampleBank,
    real_val: &LabeledDataset,
    cfg: &ClassifierConfig,
) -> Result<(Accuracy, TrainedClassifier), EvalError> {
    bank.validate(real_val.class_names())?;
    let model = fit_self_selected(&bank.images, cfg)?;
    assert_disjoint(&model.seen, &REAL_TAGS, "the GAN-train classifier")?;
    Ok((accuracy(&model, real_val), model))
}

/// Real-data budget matched to a bank: `per_class` training images per
/// class, same selection protocol as GAN-train.
pub fn equal_budget_baseline(
    real_train: &LabeledDataset,
    real_val: &LabeledDataset,
    per_class: usize,
    cfg: &ClassifierConfig,
) -> Result<Accuracy, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut idx = Vec::new();
    for c in 0..real_train.n_classes() {
        let have = real_train.indices_of_class(c).len();
        if have < per_class {
            return Err(EvalError::TooFew {
                class: real_train.class_names()[c].clone(),
                have,
                need: per_class,
            });
        }
        idx.extend(real_train.sample_class(c, per_class, &mut rng)?);
    }
    let subset = real_train.subset(&idx).resized(cfg.input_resolution);
    let model = fit_self_selected(&subset, cfg)?;
    Ok(accuracy(&model, real_val))
}

/// Classifier fitted on real training data and selected on real validation;
/// the GAN-test judge and the "Reals" reference.
pub struct RealReference {
    pub model: TrainedClassifier,
    pub val: Accuracy,
}

impl RealReference {
    pub fn train(real_train: &LabeledDataset, real_val: &LabeledDataset, cfg: &ClassifierConfig) -> Result<Self, EvalError> {
        let model = train_classifier(real_train, real_val, cfg)?;
        assert_disjoint(&model.seen, &SYNTHETIC_TAGS, "the GAN-test classifier")?;
        let val = accuracy(&model, real_val);
        Ok(RealReference { model, val })
    }

    /// GAN-test: accuracy of the real-trained classifier on the bank.
    pub fn gan_test(&self, bank: &SampleBank) -> Result<Accuracy, EvalError> {
        assert_disjoint(&self.model.seen, &SYNTHETIC_TAGS, "the GAN-test classifier")?;
        if bank.images.provenance().iter().any(|p| REAL_TAGS.contains(p)) {
            return Err(EvalError::Isolation("bank contains training or validation images".into()));
        }
        Ok(accuracy(&self.model, &bank.images))
    }
}

/// GAN-test with a freshly trained reference classifier.
pub fn gan_test_score(
    bank: &SampleBank,
    real_train: &LabeledDataset,
    real_val: &LabeledDataset,
    cfg: &ClassifierConfig,
) -> Result<Accuracy, EvalError> {
    bank.validate(real_val.class_names())?;
    RealReference::train(real_train, real_val, cfg)?.gan_test(bank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub gan_train: f64,
    pub gan_test: f64,
    /// Real-trained classifier on real validation.
    pub real_baseline: f64,
    /// Real-trained classifier with the bank's per-class budget, if measured.
    pub equal_budget_baseline: Option<f64>,
    pub per_class_gan_train: Vec<Option<f64>>,
    pub per_class_gan_test: Vec<Option<f64>>,
    pub per_class_real: Vec<Option<f64>>,
    pub class_names: Vec<String>,
    pub bank_per_class: usize,
    pub n_real_train: usize,
    pub n_real_val: usize,
    pub isolation_ok: bool,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    source: &'a str,
    gan_train: f64,
    gan_test: f64,
    real_baseline: f64,
    equal_budget_baseline: Option<f64>,
    bank_per_class: usize,
    n_real_train: usize,
    n_real_val: usize,
    isolation_ok: bool,
    seed: u64,
    config_hash: &'a str,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header line plus one row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(EvalRow {
            source: &self.source,
            gan_train: self.gan_train,
            gan_test: self.gan_test,
            real_baseline: self.real_baseline,
            equal_budget_baseline: self.equal_budget_baseline,
            bank_per_class: self.bank_per_class,
            n_real_train: self.n_real_train,
            n_real_val: self.n_real_val,
            isolation_ok: self.isolation_ok,
            seed: self.seed,
            config_hash: &self.config_hash,
        })
        .expect("row serializes");
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        write_text(&dir.join(format!("{stem}.json")), &self.to_json())?;
        write_text(&dir.join(format!("{stem}.csv")), &self.to_csv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), EvalError> {
    let err = |e: std::io::Error| EvalError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(err)?;
    }
    let mut f = std::fs::File::create(path).map_err(err)?;
    f.write_all(text.as_bytes()).map_err(err)
}

/// GAN-train and GAN-test of one bank against a shared real reference.
pub fn evaluate_bank(
    bank: &SampleBank,
    reference: &RealReference,
    splits: &EvalSplits,
    cfg: &ClassifierConfig,
    with_equal_budget: bool,
    config_hash: &str,
) -> Result<EvalReport, EvalError> {
    let (train_acc, _) = gan_train_score(bank, &splits.val, cfg)?;
    let test_acc = reference.gan_test(bank)?;
    let equal_budget_baseline = if with_equal_budget {
        Some(equal_budget_baseline(&splits.train, &splits.val, bank.per_class, cfg)?.overall)
    } else {
        None
    };
    Ok(EvalReport {
        source: bank.source.clone(),
        gan_train: train_acc.overall,
        gan_test: test_acc.overall,
        real_baseline: reference.val.overall,
        equal_budget_baseline,
        per_class_gan_train: train_acc.per_class,
        per_class_gan_test: test_acc.per_class,
        per_class_real: reference.val.per_class.clone(),
        class_names: splits.val.class_names().to_vec(),
        bank_per_class: bank.per_class,
        n_real_train: splits.train.len(),
        n_real_val: splits.val.len(),
        isolation_ok: true,
        config_hash: config_hash.to_string(),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, ToySpec};

    fn toy() -> LabeledDataset {
        let mut spec = ToySpec::scaled(100, 8, 3);
        spec.per_class_counts = vec![12; 7];
        make_toy_dataset(&spec).unwrap()
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let s = EvalSplits::new(&toy(), 3, 4, 1).unwrap();
        assert_eq!(s.val.class_histogram(), vec![3; 7]);
        assert_eq!(s.held_out.class_histogram(), vec![4; 7]);
        assert_eq!(s.train.class_histogram(), vec![5; 7]);
        let all: BTreeSet<_> = s
            .train
            .images()
            .iter()
            .chain(s.val.images())
            .chain(s.held_out.images())
            .map(|im| im.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        assert_eq!(all.len(), 84);
    }

    #[test]
    fn too_small_class_is_named() {
        let err = EvalSplits::new(&toy(), 6, 6, 1).unwrap_err();
        assert!(matches!(err, EvalError::TooFew { class, .. } if class == "MEL"));
    }

    #[test]
    fn stubs_cover_classes_and_carry_provenance() {
        let s = EvalSplits::new(&toy(), 3, 4, 1).unwrap();
        let r = SampleBank::stub(StubKind::Replay, &s, 4, 8, 0).unwrap();
        r.validate(s.val.class_names()).unwrap();
        assert!(r.images.provenance().iter().all(|p| *p == Provenance::RealHeldOut));
        let n = SampleBank::stub(StubKind::Noise, &s, 2, 8, 0).unwrap();
        assert_eq!(n.images.class_histogram(), vec![2; 7]);
        assert!(matches!(
            SampleBank::stub(StubKind::Replay, &s, 5, 8, 0),
            Err(EvalError::TooFew { .. })
        ));
    }

    #[test]
    fn real_images_in_a_bank_are_rejected_by_gan_train() {
        let s = EvalSplits::new(&toy(), 3, 4, 1).unwrap();
        let bank = SampleBank {
            images: s.train.clone(),
            per_class: 5,
            resolution: 8,
            source: "leak".into(),
        };
        let cfg = ClassifierConfig {
            epochs: 1,
            input_resolution: 8,
            ..Default::default()
        };
        assert!(matches!(gan_train_score(&bank, &s.val, &cfg), Err(EvalError::Isolation(_))));
    }
}
