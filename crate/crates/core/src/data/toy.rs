use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Image, LabeledDataset, Provenance, Result};

/// Class names and training-set counts of the seven-class skin lesion corpus
/// the toy data imitates.
pub const ISIC_CLASS_NAMES: [&str; 7] = ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"];
pub const ISIC_CLASS_COUNTS: [usize; 7] = [1113, 6705, 514, 327, 1099, 115, 142];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Blob,
    Disk,
    Ring,
    Square,
    Stripes,
    Target,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStyle {
    pub name: String,
    pub color: [f32; 3],
    pub shape: ShapeKind,
}

fn default_styles() -> Vec<ClassStyle> {
    let table = [
        ([0.25, 0.15, 0.12], ShapeKind::Blob),
        ([0.55, 0.35, 0.22], ShapeKind::Disk),
        ([0.90, 0.50, 0.60], ShapeKind::Ring),
        ([0.75, 0.20, 0.15], ShapeKind::Square),
        ([0.70, 0.62, 0.35], ShapeKind::Stripes),
        ([0.45, 0.30, 0.50], ShapeKind::Target),
        ([0.55, 0.05, 0.30], ShapeKind::Cross),
    ];
    ISIC_CLASS_NAMES
        .iter()
        .zip(table)
        .map(|(n, (color, shape))| ClassStyle {
            name: n.to_string(),
            color,
            shape,
        })
        .collect()
}

/// Procedural stand-in for the lesion corpus: one hue and shape family per
/// class, counts following the corpus imbalance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub n_classes: usize,
    pub per_class_counts: Vec<usize>,
    pub image_size: usize,
    pub classes: Vec<ClassStyle>,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec::scaled(10, 32, 0)
    }
}

impl ToySpec {
    /// Corpus counts divided by `divisor` (rounded, at least 1).
    pub fn scaled(divisor: usize, image_size: usize, seed: u64) -> Self {
        let d = divisor.max(1) as f64;
        ToySpec {
            n_classes: 7,
            per_class_counts: ISIC_CLASS_COUNTS.iter().map(|&n| ((n as f64 / d).round() as usize).max(1)).collect(),
            image_size,
            classes: default_styles(),
            noise: 0.03,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(DataError::Invalid { what: "toy spec", reason });
        if self.n_classes == 0 || self.n_classes > self.classes.len() {
            return bad(format!("n_classes {} must be in 1..={}", self.n_classes, self.classes.len()));
        }
        if self.per_class_counts.len() != self.n_classes {
            return bad(format!(
                "{} counts for {} classes",
                self.per_class_counts.len(),
                self.n_classes
            ));
        }
        if self.per_class_counts.contains(&0) {
            return bad("every class count must be >= 1".into());
        }
        if self.image_size < 4 {
            return bad(format!("image_size {} must be >= 4", self.image_size));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        Ok(())
    }
}

/// Renders the dataset. Each class draws from its own stream, so changing
/// one class's count leaves the other classes' images untouched.
pub fn make_toy_dataset(spec: &ToySpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let styles = &spec.classes[..spec.n_classes];
    let mut ds = LabeledDataset::new(styles.iter().map(|s| s.name.clone()).collect());
    for (c, style) in styles.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(c as u64 + 1);
        for _ in 0..spec.per_class_counts[c] {
            ds.push(render(style, spec.image_size, spec.noise, &mut rng), c, Provenance::Real);
        }
    }
    Ok(ds)
}

fn inside(shape: ShapeKind, u: f64, v: f64, phase: f64) -> bool {
    let d = (u * u + v * v).sqrt();
    match shape {
        ShapeKind::Blob => {
            let t = v.atan2(u);
            d < 1.0 + 0.25 * (3.0 * t + phase).sin() + 0.12 * (5.0 * t - phase).sin()
        }
        ShapeKind::Disk => d < 1.0,
        ShapeKind::Ring => (0.55..1.0).contains(&d),
        ShapeKind::Square => u.abs().max(v.abs()) < 0.85,
        ShapeKind::Stripes => d < 1.0 && (7.0 * u).sin() > 0.0,
        ShapeKind::Target => d < 0.45 || (0.75..1.0).contains(&d),
        ShapeKind::Cross => u.abs().max(v.abs()) < 1.0 && (u.abs() < 0.3 || v.abs() < 0.3),
    }
}

fn render(style: &ClassStyle, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let n = size as f64;
    let skin = [0.87, 0.72, 0.62].map(|v: f64| v + rng.random_range(-0.05..0.05));
    let gain = rng.random_range(0.85..1.15);
    let colour = style.color.map(|v| (v as f64 * gain).clamp(0.0, 1.0));
    let radius = n * rng.random_range(0.24..0.34);
    let (cx, cy) = (
        n / 2.0 + n * rng.random_range(-0.08..0.08),
        n / 2.0 + n * rng.random_range(-0.08..0.08),
    );
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (sa, ca) = angle.sin_cos();
    let gauss = Normal::new(0.0, noise.max(1e-12)).expect("finite noise");
    let mut img = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            // 2x2 supersampled coverage
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (dx, dy) = ((x as f64 + ox - cx) / radius, (y as f64 + oy - cy) / radius);
                let (u, v) = (dx * ca + dy * sa, -dx * sa + dy * ca);
                if inside(style.shape, u, v, phase) {
                    cover += 0.25;
                }
            }
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let base = skin[c] * (1.0 - cover) + colour[c] * cover;
                let eps = if noise > 0.0 { gauss.sample(rng) } else { 0.0 };
                px[c] = (base + eps).clamp(0.0, 1.0) as f32;
            }
            img.set_pixel(y, x, px);
        }
    }
    img
}
