use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::networks::FadeState;

/// Progressive-growing position derived from the number of real images shown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub images_shown: u64,
    pub stage_index: usize,
    pub resolution: u32,
    pub alpha: f64,
    pub batch_size: usize,
    pub fading: bool,
}

impl ScheduleState {
    pub fn fade(&self) -> FadeState {
        FadeState {
            stage_index: self.stage_index,
            alpha: self.alpha,
        }
    }
}

/// Phases of `images_per_phase` images alternate stabilize/fade, starting
/// with the stabilized 4x4 stage; during a fade alpha ramps linearly from 0
/// to 1. Counts past `total_images` clamp to the stage reached, stabilized.
/// The config is assumed valid.
pub fn schedule_at(cfg: &TrainConfig, images_shown: u64) -> ScheduleState {
    let n = images_shown.min(cfg.total_images);
    let per = cfg.images_per_phase.max(1);
    let phase = n / per;
    let last = cfg.n_stages().saturating_sub(1);
    let (mut stage, mut alpha, mut fading) = if phase == 0 {
        (0, 1.0, false)
    } else if phase % 2 == 1 {
        let a = (n - phase * per) as f64 / per as f64;
        (phase.div_ceil(2) as usize, a, true)
    } else {
        ((phase / 2) as usize, 1.0, false)
    };
    if stage > last {
        stage = last;
        alpha = 1.0;
        fading = false;
    }
    if images_shown > cfg.total_images {
        alpha = 1.0;
        fading = false;
    }
    let resolution = 4u32 << stage;
    ScheduleState {
        images_shown,
        stage_index: stage,
        resolution,
        alpha,
        batch_size: cfg.batch_by_resolution.get(&resolution).copied().unwrap_or(1),
        fading,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            images_per_phase: 1000,
            total_images: 100_000,
            final_resolution: 32,
            ..Default::default()
        }
    }

    #[test]
    fn documented_examples() {
        let c = cfg();
        let s = schedule_at(&c, 0);
        assert_eq!((s.stage_index, s.alpha, s.fading), (0, 1.0, false));
        let s = schedule_at(&c, 1500);
        assert_eq!((s.stage_index, s.resolution, s.alpha, s.fading), (1, 8, 0.5, true));
    }

    #[test]
    fn saturates_at_last_stage() {
        let s = schedule_at(&cfg(), 50_000);
        assert_eq!((s.stage_index, s.resolution, s.alpha), (3, 32, 1.0));
    }

    #[test]
    fn clamps_past_total() {
        let c = TrainConfig {
            total_images: 1500,
            ..cfg()
        };
        let s = schedule_at(&c, 1700);
        assert_eq!((s.stage_index, s.alpha, s.fading), (1, 1.0, false));
        assert_eq!(s.images_shown, 1700);
    }
}
