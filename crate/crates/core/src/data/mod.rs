//! Labeled image datasets, preprocessing, augmentation and the procedural
//! class-imbalanced toy corpus.

mod augment;
mod folder;
mod toy;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, flip_horizontal, flip_vertical, rotate, AugmentOps, AugmentPolicy};
pub use folder::{center_crop_resize, load_image_folder, resize_area, save_image_folder, LoadReport};
pub use toy::{make_toy_dataset, ClassStyle, ShapeKind, ToySpec, ISIC_CLASS_COUNTS, ISIC_CLASS_NAMES};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class '{0}' has no readable images")]
    EmptyClass(String),
    #[error("dataset root {path} is unusable: {reason}")]
    Root { path: String, reason: String },
    #[error("crop {crop} larger than image {height}x{width}")]
    Crop { crop: usize, height: usize, width: usize },
    #[error("class '{class}' has {have} items, need at least {need}")]
    TooFewItems { class: String, have: usize, need: usize },
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// RGB image, row-major `H x W x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image buffer size");
        Image { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// `[3, H, W]` with values mapped by `f`.
    fn to_chw<T: Real>(&self, f: impl Fn(usize, f32) -> f64) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![T::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = T::c(f(c, self.data[(y * w + x) * 3 + c]));
                }
            }
        }
        Tensor::new(vec![3, h, w], out)
    }

    /// GAN convention: `[3,H,W]` in `[-1, 1]`.
    pub fn to_gan_tensor<T: Real>(&self) -> Tensor<T> {
        self.to_chw(|_, v| v as f64 * 2.0 - 1.0)
    }

    /// Inverse of [`Image::to_gan_tensor`], clamped to `[0, 1]`.
    pub fn from_gan_tensor<T: Real>(t: &Tensor<T>) -> Self {
        Self::from_chw(t, |_, v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
    }

    fn from_chw<T: Real>(t: &Tensor<T>, f: impl Fn(usize, f64) -> f64) -> Self {
        let s = t.shape();
        assert!(s.len() == 3 && s[0] == 3, "expected [3,H,W], got {s:?}");
        let (h, w) = (s[1], s[2]);
        let mut data = vec![0.0; h * w * 3];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(y * w + x) * 3 + c] = f(c, t.data()[(c * h + y) * w + x].as_f64()) as f32;
                }
            }
        }
        Image { height: h, width: w, data }
    }
}

pub const CLASSIFIER_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CLASSIFIER_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel `(x - mean) / std` with the ImageNet constants; `[3,H,W]`.
pub fn normalize_for_classifier<T: Real>(image: &Image) -> Tensor<T> {
    image.to_chw(|c, v| (v as f64 - CLASSIFIER_MEAN[c]) / CLASSIFIER_STD[c])
}

pub fn denormalize_from_classifier<T: Real>(t: &Tensor<T>) -> Image {
    Image::from_chw(t, |c, v| v * CLASSIFIER_STD[c] + CLASSIFIER_MEAN[c])
}

/// Where a sample came from; used to assert evaluation isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    RealTrain,
    RealVal,
    RealHeldOut,
    Generated,
    Augmented,
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    provenance: Vec<Provenance>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(class_names: Vec<String>) -> Self {
        LabeledDataset {
            images: Vec::new(),
            labels: Vec::new(),
            provenance: Vec::new(),
            class_names,
        }
    }

    pub fn push(&mut self, image: Image, label: usize, provenance: Provenance) {
        assert!(label < self.class_names.len(), "label {label} out of range");
        self.images.push(image);
        self.labels.push(label);
        self.provenance.push(provenance);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn item(&self, i: usize) -> (&Image, usize) {
        (&self.images[i], self.labels[i])
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes()];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Histogram keyed by class name.
    pub fn named_histogram(&self) -> BTreeMap<String, usize> {
        self.class_names.iter().cloned().zip(self.class_histogram()).collect()
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut out = LabeledDataset::new(self.class_names.clone());
        for &i in idx {
            out.push(self.images[i].clone(), self.labels[i], self.provenance[i]);
        }
        out
    }

    /// Copy with every item's provenance replaced.
    pub fn with_provenance(&self, p: Provenance) -> Self {
        let mut out = self.clone();
        out.provenance.iter_mut().for_each(|q| *q = p);
        out
    }

    pub fn extend(&mut self, other: &LabeledDataset) {
        assert_eq!(self.class_names, other.class_names, "class spaces differ");
        self.images.extend(other.images.iter().cloned());
        self.labels.extend_from_slice(&other.labels);
        self.provenance.extend_from_slice(&other.provenance);
    }

    pub fn map_images(&self, f: impl Fn(&Image) -> Image) -> Self {
        LabeledDataset {
            images: self.images.iter().map(f).collect(),
            labels: self.labels.clone(),
            provenance: self.provenance.clone(),
            class_names: self.class_names.clone(),
        }
    }

    /// Area-resizes every image to `size x size` (no-op when already that size).
    pub fn resized(&self, size: usize) -> Self {
        self.map_images(|im| {
            if im.height == size && im.width == size {
                im.clone()
            } else {
                resize_area(im, size)
            }
        })
    }

    /// Checks the documented invariants.
    pub fn validate(&self) -> Result<()> {
        if self.labels.iter().any(|&l| l >= self.n_classes()) {
            return Err(DataError::Invalid {
                what: "dataset",
                reason: "label out of range".into(),
            });
        }
        if let Some(i) = self.images.iter().position(|im| !im.is_valid()) {
            return Err(DataError::Invalid {
                what: "dataset",
                reason: format!("image {i} has values outside [0, 1]"),
            });
        }
        Ok(())
    }

    /// Draws `n` items of class `class` without replacement.
    pub fn sample_class(&self, class: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut idx = self.indices_of_class(class);
        if idx.len() < n {
            return Err(DataError::TooFewItems {
                class: self.class_names[class].clone(),
                have: idx.len(),
                need: n,
            });
        }
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
        Ok(idx)
    }
}

/// Per-class proportional split. The validation total is `round(N * fraction)`,
/// apportioned across classes by largest remainder so that every class is
/// within one item of its exact share.
pub fn split_stratified(ds: &LabeledDataset, val_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(DataError::Invalid {
            what: "val_fraction",
            reason: format!("{val_fraction} not in [0, 1)"),
        });
    }
    let hist = ds.class_histogram();
    for (c, &n) in hist.iter().enumerate() {
        if n < 2 {
            return Err(DataError::TooFewItems {
                class: ds.class_names[c].clone(),
                have: n,
                need: 2,
            });
        }
    }
    let total_val = (ds.len() as f64 * val_fraction).round() as usize;
    let exact: Vec<f64> = hist.iter().map(|&n| n as f64 * val_fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total_val.saturating_sub(take.iter().sum());
    let mut order: Vec<usize> = (0..hist.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in &order {
        if rest == 0 {
            break;
        }
        if take[c] + 1 < hist[c] {
            take[c] += 1;
            rest -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (c, &k) in take.iter().enumerate() {
        let mut idx = ds.indices_of_class(c);
        idx.shuffle(&mut rng);
        va.extend_from_slice(&idx[..k]);
        tr.extend_from_slice(&idx[k..]);
    }
    tr.sort_unstable();
    va.sort_unstable();
    Ok((ds.subset(&tr), ds.subset(&va)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(counts: &[usize]) -> LabeledDataset {
        let names = (0..counts.len()).map(|i| format!("c{i}")).collect();
        let mut ds = LabeledDataset::new(names);
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let v = (i % 10) as f32 / 10.0;
                ds.push(Image::filled(1, 1, [v, c as f32 / 10.0, 0.5]), c, Provenance::Real);
            }
        }
        ds
    }

    #[test]
    fn split_ten_per_class() {
        let ds = tiny(&[10, 10, 10]);
        let (tr, va) = split_stratified(&ds, 0.2, 1).unwrap();
        assert_eq!(tr.class_histogram(), vec![8, 8, 8]);
        assert_eq!(va.class_histogram(), vec![2, 2, 2]);
    }

    #[test]
    fn split_isic_sizes() {
        let ds = tiny(&ISIC_CLASS_COUNTS);
        assert_eq!(ds.len(), 10015);
        let (tr, va) = split_stratified(&ds, 501.0 / 10015.0, 7).unwrap();
        assert_eq!((tr.len(), va.len()), (9514, 501));
        for (c, &n) in ISIC_CLASS_COUNTS.iter().enumerate() {
            let share = n as f64 * 501.0 / 10015.0;
            assert!((va.class_histogram()[c] as f64 - share).abs() <= 1.0);
        }
    }

    #[test]
    fn split_rejects_singleton_class() {
        let ds = tiny(&[5, 1]);
        assert!(matches!(split_stratified(&ds, 0.2, 0), Err(DataError::TooFewItems { .. })));
    }

    #[test]
    fn normalization_constants() {
        let im = Image::filled(1, 1, [0.485, 0.456, 0.406]);
        let t = normalize_for_classifier::<f64>(&im);
        assert!(t.data().iter().all(|v| v.abs() < 1e-7));
        let t = normalize_for_classifier::<f64>(&Image::filled(1, 1, [1.0, 1.0, 1.0]));
        let want = [(1.0 - 0.485) / 0.229, (1.0 - 0.456) / 0.224, (1.0 - 0.406) / 0.225];
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((t.data()[0] - 2.249).abs() < 1e-3);
        assert!((t.data()[1] - 2.429).abs() < 1e-3);
        assert!((t.data()[2] - 2.640).abs() < 1e-3);
    }

    #[test]
    fn gan_tensor_round_trip() {
        let im = Image::new(1, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]);
        let t = im.to_gan_tensor::<f64>();
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(Image::from_gan_tensor(&t), im);
    }
}
