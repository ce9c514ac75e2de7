#![allow(dead_code)]

use apgan::data::{make_toy_dataset, ToySpec};
use apgan::networks::NetworkSpec;
use apgan::tensor::Tensor;
use apgan::train::{paper_batch_map, ImageSource, TrainConfig};

/// 7 stages (4..256), 1000 images per phase, 20000 images in total.
pub fn paper_schedule_config() -> TrainConfig {
    TrainConfig {
        images_per_phase: 1000,
        total_images: 20_000,
        final_resolution: 256,
        batch_by_resolution: paper_batch_map(),
        ..Default::default()
    }
}

/// (images shown, stage, resolution, alpha, batch, fading), worked out by hand:
/// phase = n / 1000; phase 0 stabilizes 4x4, odd phase p fades into stage
/// (p+1)/2 with alpha = (n mod 1000)/1000, even phase p stabilizes stage p/2;
/// nothing grows past 256, and counts past 20000 read as 20000.
pub const SCHEDULE_TABLE: [(u64, usize, u32, f64, usize, bool); 21] = [
    (0, 0, 4, 1.0, 256, false),
    (999, 0, 4, 1.0, 256, false),
    (1000, 1, 8, 0.0, 256, true),
    (1250, 1, 8, 0.25, 256, true),
    (1999, 1, 8, 0.999, 256, true),
    (2000, 1, 8, 1.0, 256, false),
    (3000, 2, 16, 0.0, 128, true),
    (3500, 2, 16, 0.5, 128, true),
    (4000, 2, 16, 1.0, 128, false),
    (5000, 3, 32, 0.0, 64, true),
    (5750, 3, 32, 0.75, 64, true),
    (6000, 3, 32, 1.0, 64, false),
    (7000, 4, 64, 0.0, 32, true),
    (8000, 4, 64, 1.0, 32, false),
    (9100, 5, 128, 0.1, 16, true),
    (10000, 5, 128, 1.0, 16, false),
    (11000, 6, 256, 0.0, 8, true),
    (11500, 6, 256, 0.5, 8, true),
    (12000, 6, 256, 1.0, 8, false),
    (15000, 6, 256, 1.0, 8, false),
    (25000, 6, 256, 1.0, 8, false),
];

/// Small networks on an 8x8 toy set: fast enough for many steps in a test.
pub fn tiny_setup(seed: u64) -> (NetworkSpec, TrainConfig, ImageSource) {
    let spec = NetworkSpec::with_channels(8, 8, 7, 16, 8)
        .unwrap()
        .with_attention(&[8])
        .unwrap();
    let cfg = TrainConfig {
        total_images: 640,
        images_per_phase: 160,
        final_resolution: 8,
        batch_by_resolution: [(4, 8), (8, 8)].into_iter().collect(),
        checkpoint_every: 20,
        seed,
        ..Default::default()
    };
    let ds = make_toy_dataset(&ToySpec::scaled(50, 8, seed)).unwrap();
    (spec, cfg, ImageSource::new(ds, 8, None).unwrap())
}

/// Writes an ISIC-shaped folder of 1x1 PNGs with the corpus histogram
/// (one subdirectory per class, 10015 files in total).
pub fn write_isic_standin(root: &std::path::Path) {
    use apgan::data::{ISIC_CLASS_COUNTS, ISIC_CLASS_NAMES};
    for (c, (name, &n)) in ISIC_CLASS_NAMES.iter().zip(&ISIC_CLASS_COUNTS).enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let px = image::RgbImage::from_pixel(1, 1, image::Rgb([(c * 30) as u8, 100, 200]));
        let mut bytes = Vec::new();
        px.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        for i in 0..n {
            std::fs::write(dir.join(format!("ISIC_{i:07}.png")), &bytes).unwrap();
        }
    }
}

/// Direct "same"-padded convolution, `w` as `[cout, cin, k, k]`.
pub fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * cout * h * wd];
    for ni in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * cin + c) * k + ky) * k + kx]
                                    * x.data()[((ni * cin + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((ni * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}
