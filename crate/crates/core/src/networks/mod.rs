//! Progressive conditional generator and discriminator with optional
//! simplified non-local attention at a chosen stage.

mod discriminator;
mod generator;
pub mod layers;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use discriminator::Discriminator;
pub use generator::Generator;
pub use layers::{
    downsample2x, equalized_scale, minibatch_stddev, one_hot, pixel_norm, upsample2x, Layout, ParamSet,
};

use crate::attention::FeatureMap;
use crate::autograd::Var;

pub const RESOLUTIONS: [u32; 7] = [4, 8, 16, 32, 64, 128, 256];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network structure: {0}")]
    Structure(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error("wrong input resolution: expected {expected}x{expected}, got {actual_h}x{actual_w}")]
    Resolution {
        expected: u32,
        actual_h: usize,
        actual_w: usize,
    },
    #[error("cannot downsample odd extent {height}x{width}")]
    OddExtent { height: usize, width: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub resolution: u32,
    pub channels: usize,
    pub has_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub stages: Vec<StageSpec>,
    pub latent_dim: usize,
    pub n_classes: usize,
    pub base_channels: usize,
    /// Channels halve with every doubling of resolution down to this floor.
    pub min_channels: usize,
    pub max_attention_stages: usize,
    pub attention_in_generator: bool,
    pub attention_in_discriminator: bool,
}

pub const DEFAULT_BASE_CHANNELS: usize = 128;
pub const DEFAULT_MIN_CHANNELS: usize = 16;
pub const DEFAULT_LATENT_DIM: usize = 64;

impl NetworkSpec {
    /// Stages `4, 8, ..., final_resolution` with default channel widths and no attention.
    pub fn progressive(final_resolution: u32, latent_dim: usize, n_classes: usize) -> Result<Self, NetworkError> {
        Self::with_channels(
            final_resolution,
            latent_dim,
            n_classes,
            DEFAULT_BASE_CHANNELS,
            DEFAULT_MIN_CHANNELS,
        )
    }

    pub fn with_channels(
        final_resolution: u32,
        latent_dim: usize,
        n_classes: usize,
        base_channels: usize,
        min_channels: usize,
    ) -> Result<Self, NetworkError> {
        let n = RESOLUTIONS
            .iter()
            .position(|&r| r == final_resolution)
            .ok_or_else(|| NetworkError::Structure(format!("unsupported final resolution {final_resolution}")))?;
        let stages = (0..=n)
            .map(|i| StageSpec {
                resolution: RESOLUTIONS[i],
                channels: (base_channels >> i).max(min_channels),
                has_attention: false,
            })
            .collect();
        let spec = NetworkSpec {
            stages,
            latent_dim,
            n_classes,
            base_channels,
            min_channels,
            max_attention_stages: 1,
            attention_in_generator: true,
            attention_in_discriminator: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Marks the stages at the given resolutions as attention stages.
    pub fn with_attention(mut self, resolutions: &[u32]) -> Result<Self, NetworkError> {
        for s in &mut self.stages {
            s.has_attention = resolutions.contains(&s.resolution);
        }
        for r in resolutions {
            if self.stage_of(*r).is_none() {
                return Err(NetworkError::Structure(format!("no stage at resolution {r}")));
            }
        }
        if resolutions.len() > self.max_attention_stages {
            self.max_attention_stages = resolutions.len();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let err = |m: String| Err(NetworkError::Structure(m));
        if self.stages.is_empty() {
            return err("no stages".into());
        }
        if self.stages[0].resolution != 4 {
            return err(format!("first stage must be 4x4, got {}", self.stages[0].resolution));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !RESOLUTIONS.contains(&s.resolution) {
                return err(format!("stage {i}: resolution {} not in {RESOLUTIONS:?}", s.resolution));
            }
            if s.channels == 0 {
                return err(format!("stage {i}: zero channels"));
            }
            if i > 0 && s.resolution != self.stages[i - 1].resolution * 2 {
                return err(format!("stage {i}: resolutions must double"));
            }
        }
        if self.stages[0].has_attention {
            return err("the 4x4 stage has no resample layer to attach attention to".into());
        }
        let n_att = self.stages.iter().filter(|s| s.has_attention).count();
        if n_att > self.max_attention_stages {
            return err(format!(
                "{n_att} attention stages exceed the configured maximum {}",
                self.max_attention_stages
            ));
        }
        if self.latent_dim == 0 || self.n_classes == 0 {
            return err("latent_dim and n_classes must be >= 1".into());
        }
        Ok(())
    }

    pub fn stage_of(&self, resolution: u32) -> Option<usize> {
        self.stages.iter().position(|s| s.resolution == resolution)
    }

    pub fn final_resolution(&self) -> u32 {
        self.stages.last().map_or(0, |s| s.resolution)
    }

    pub fn attention_resolutions(&self) -> Vec<u32> {
        self.stages.iter().filter(|s| s.has_attention).map(|s| s.resolution).collect()
    }

    /// Human-readable architecture table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let g = Generator::new(self);
        let d = Discriminator::new(self);
        out.push_str(&format!(
            "latent_dim={} n_classes={} base_channels={} min_channels={}\n",
            self.latent_dim, self.n_classes, self.base_channels, self.min_channels
        ));
        out.push_str("stage  resolution  channels  attention\n");
        for (i, s) in self.stages.iter().enumerate() {
            let att = match (s.has_attention, self.attention_in_generator, self.attention_in_discriminator) {
                (false, _, _) => "-",
                (true, true, true) => "G+D",
                (true, true, false) => "G",
                (true, false, true) => "D",
                (true, false, false) => "-",
            };
            out.push_str(&format!("{i:>5}  {:>10}  {:>8}  {att:>9}\n", s.resolution, s.channels));
        }
        match (g, d) {
            (Ok(g), Ok(d)) => out.push_str(&format!(
                "generator: {} tensors / {} scalars\ndiscriminator: {} tensors / {} scalars\n",
                g.layout().len(),
                g.layout().n_scalars(),
                d.layout().len(),
                d.layout().n_scalars()
            )),
            (Err(e), _) | (_, Err(e)) => out.push_str(&format!("invalid: {e}\n")),
        }
        out
    }
}

/// Active stage and fade-in blend weight (`alpha = 1` means fully stabilised).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadeState {
    pub stage_index: usize,
    pub alpha: f64,
}

impl FadeState {
    pub fn stable(stage_index: usize) -> Self {
        FadeState {
            stage_index,
            alpha: 1.0,
        }
    }

    fn check(&self, spec: &NetworkSpec) -> Result<(), NetworkError> {
        if self.stage_index >= spec.stages.len() {
            return Err(NetworkError::Structure(format!(
                "stage index {} beyond {} stages",
                self.stage_index,
                spec.stages.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NetworkError::Structure(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
    pub label: usize,
}

impl LatentCode {
    pub fn sample(latent_dim: usize, label: usize, rng: &mut impl Rng) -> Self {
        LatentCode {
            z: (0..latent_dim).map(|_| rng.sample(StandardNormal)).collect(),
            label,
        }
    }
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<(), NetworkError> {
    match labels.iter().find(|&&l| l >= n_classes) {
        Some(&label) => Err(NetworkError::Label { label, n_classes }),
        None => Ok(()),
    }
}

fn check_bound<T: crate::tensor::Real>(layout: &Layout, p: &[Var<T>]) -> Result<(), NetworkError> {
    if p.len() != layout.len() {
        return Err(NetworkError::Params(format!(
            "expected {} parameter tensors, got {}",
            layout.len(),
            p.len()
        )));
    }
    for (spec, v) in layout.specs().iter().zip(p) {
        if spec.shape != v.shape() {
            return Err(NetworkError::Params(format!(
                "parameter {} expected shape {:?}, got {:?}",
                spec.name,
                spec.shape,
                v.shape()
            )));
        }
    }
    Ok(())
}

/// Pixel normalisation of a single feature map.
pub fn pixel_norm_map(x: &FeatureMap, epsilon: f64) -> FeatureMap {
    let t = Var::constant(x.to_tensor::<f64>());
    let out = pixel_norm(&t, epsilon);
    FeatureMap::new(x.channels(), x.height(), x.width(), out.value().data().to_vec())
        .expect("pixel norm preserves shape and finiteness")
}
