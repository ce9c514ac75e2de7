use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::networks::RESOLUTIONS;

/// Paper-scale resolution to minibatch map.
pub const PAPER_BATCH_MAP: [(u32, usize); 7] = [(4, 256), (8, 256), (16, 128), (32, 64), (64, 32), (128, 16), (256, 8)];
pub const DESK_BATCH_DIVISOR: usize = 16;
pub const DESK_BATCH_FLOOR: usize = 4;

/// Adversarial training hyperparameters. Learning rates follow the explicit
/// `lr_d`/`lr_g` pair unless `ttur_ratio` is set, in which case
/// `lr_d = ttur_ratio * lr_g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub ttur_ratio: Option<f64>,
    pub d_g_step_ratio: u32,
    pub gp_weight: f64,
    pub drift_weight: f64,
    pub total_images: u64,
    pub images_per_phase: u64,
    #[serde(with = "resolution_keys")]
    pub batch_by_resolution: BTreeMap<u32, usize>,
    pub final_resolution: u32,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 0.001,
            lr_d: 0.004,
            ttur_ratio: None,
            d_g_step_ratio: 1,
            gp_weight: 10.0,
            drift_weight: 0.001,
            total_images: 25_000,
            images_per_phase: 6_000,
            batch_by_resolution: desk_batch_map(DESK_BATCH_DIVISOR, DESK_BATCH_FLOOR),
            final_resolution: 16,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

pub fn paper_batch_map() -> BTreeMap<u32, usize> {
    PAPER_BATCH_MAP.into_iter().collect()
}

/// Paper map divided by `divisor`, never below `floor`.
pub fn desk_batch_map(divisor: usize, floor: usize) -> BTreeMap<u32, usize> {
    PAPER_BATCH_MAP
        .into_iter()
        .map(|(r, b)| (r, (b / divisor.max(1)).max(floor)))
        .collect()
}

/// One offending field and why.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldProblem {
    pub field: String,
    pub reason: String,
}

/// Every invalid field found, not only the first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<FieldProblem>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid training config:")?;
        for p in &self.problems {
            write!(f, "\n  {}: {}", p.field, p.reason)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut bad = |field: &str, reason: String| {
            problems.push(FieldProblem {
                field: field.to_string(),
                reason,
            })
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr_g) {
            bad("lr_g", format!("{} must be > 0", self.lr_g));
        }
        if !positive(self.lr_d) {
            bad("lr_d", format!("{} must be > 0", self.lr_d));
        }
        if let Some(r) = self.ttur_ratio {
            if !positive(r) {
                bad("ttur_ratio", format!("{r} must be > 0"));
            }
        }
        if self.d_g_step_ratio == 0 {
            bad("d_g_step_ratio", "must be >= 1".into());
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            bad("gp_weight", format!("{} must be >= 0", self.gp_weight));
        }
        if !(self.drift_weight >= 0.0 && self.drift_weight.is_finite()) {
            bad("drift_weight", format!("{} must be >= 0", self.drift_weight));
        }
        if self.total_images == 0 {
            bad("total_images", "must be >= 1".into());
        }
        if self.images_per_phase == 0 {
            bad("images_per_phase", "must be >= 1".into());
        }
        if !RESOLUTIONS.contains(&self.final_resolution) {
            bad(
                "final_resolution",
                format!("{} not one of {RESOLUTIONS:?}", self.final_resolution),
            );
        }
        for (r, b) in &self.batch_by_resolution {
            if *b == 0 {
                bad("batch_by_resolution", format!("resolution {r}: batch size must be >= 1"));
            }
        }
        for r in self.resolutions() {
            if !self.batch_by_resolution.contains_key(&r) {
                bad("batch_by_resolution", format!("missing entry for resolution {r}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }

    /// Stage resolutions `4 ..= final_resolution`.
    pub fn resolutions(&self) -> Vec<u32> {
        RESOLUTIONS.iter().copied().filter(|&r| r <= self.final_resolution).collect()
    }

    pub fn n_stages(&self) -> usize {
        self.resolutions().len()
    }

    /// Effective `(lr_d, lr_g)`.
    pub fn effective_lrs(&self) -> (f64, f64) {
        match self.ttur_ratio {
            Some(r) => (r * self.lr_g, self.lr_g),
            None => (self.lr_d, self.lr_g),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

mod resolution_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<u32, usize>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, usize>, D::Error> {
        let raw = BTreeMap::<String, usize>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.trim()
                    .parse::<u32>()
                    .map(|r| (r, v))
                    .map_err(|_| D::Error::custom(format!("resolution key '{k}' is not an integer")))
            })
            .collect()
    }
}
