use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Image, Result};

/// Standard geometric augmentation: rotation, flips, scale and shear, each
/// applied with independent probability `probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Degrees, counter-clockwise as displayed.
    pub rotation_range: [f64; 2],
    pub h_flip: bool,
    pub v_flip: bool,
    pub scale_range: [f64; 2],
    pub skew_magnitude: f64,
    pub probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotation_range: [-90.0, 90.0],
            h_flip: true,
            v_flip: true,
            scale_range: [0.9, 1.1],
            skew_magnitude: 0.2,
            probability: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(DataError::Invalid { what: "augment policy", reason });
        let [r0, r1] = self.rotation_range;
        if !(-180.0..=180.0).contains(&r0) || !(-180.0..=180.0).contains(&r1) || r0 > r1 {
            return bad(format!("rotation_range {:?} must be ordered within [-180, 180]", self.rotation_range));
        }
        let [s0, s1] = self.scale_range;
        if !(s0 > 0.0 && s1 >= s0 && s1.is_finite()) {
            return bad(format!("scale_range {:?} must be positive and ordered", self.scale_range));
        }
        if !(self.skew_magnitude >= 0.0 && self.skew_magnitude.is_finite()) {
            return bad(format!("skew_magnitude {} must be >= 0", self.skew_magnitude));
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} not in [0, 1]", self.probability));
        }
        Ok(())
    }

    /// Draws one concrete transform. Always consumes the same number of
    /// random values so streams stay aligned across samples.
    pub fn sample(&self, rng: &mut impl Rng) -> AugmentOps {
        let mut coin = || rng.random::<f64>() < self.probability;
        let (c_rot, c_h, c_v, c_scale, c_shear) = (coin(), coin(), coin(), coin(), coin());
        let angle = lerp(self.rotation_range, rng.random::<f64>());
        let scale = lerp(self.scale_range, rng.random::<f64>());
        let shear = lerp([-self.skew_magnitude, self.skew_magnitude], rng.random::<f64>());
        AugmentOps {
            rotation_deg: c_rot.then_some(angle),
            h_flip: c_h && self.h_flip,
            v_flip: c_v && self.v_flip,
            scale: c_scale.then_some(scale),
            shear: (c_shear && self.skew_magnitude > 0.0).then_some(shear),
        }
    }
}

fn lerp([a, b]: [f64; 2], u: f64) -> f64 {
    a + (b - a) * u
}

/// A concrete transform; `None`/`false` entries are skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentOps {
    pub rotation_deg: Option<f64>,
    pub h_flip: bool,
    pub v_flip: bool,
    pub scale: Option<f64>,
    pub shear: Option<f64>,
}

impl AugmentOps {
    /// Applies rotation, flips, scale, then shear; output clamped to `[0, 1]`.
    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.clone();
        if let Some(deg) = self.rotation_deg {
            out = rotate(&out, deg);
        }
        if self.h_flip {
            out = flip_horizontal(&out);
        }
        if self.v_flip {
            out = flip_vertical(&out);
        }
        if let Some(s) = self.scale {
            out = warp(&out, |dx, dy| (dx / s, dy / s));
        }
        if let Some(k) = self.shear {
            out = warp(&out, |dx, dy| (dx - k * dy, dy));
        }
        out.clamp01();
        out
    }
}

/// Samples and applies a transform; the label passes through unchanged.
pub fn augment(image: &Image, label: usize, policy: &AugmentPolicy, rng: &mut impl Rng) -> (Image, usize) {
    (policy.sample(rng).apply(image), label)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(y, x, img.pixel(y, w - 1 - x));
        }
    }
    out
}

pub fn flip_vertical(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(y, x, img.pixel(h - 1 - y, x));
        }
    }
    out
}

/// Counter-clockwise rotation by `deg`. Quarter turns of square images are
/// exact index permutations; other angles resample bilinearly.
pub fn rotate(img: &Image, deg: f64) -> Image {
    let quarter = deg / 90.0;
    if img.height() == img.width() && quarter == quarter.round() {
        let mut out = img.clone();
        for _ in 0..(quarter.round() as i64).rem_euclid(4) {
            out = rotate_quarter(&out);
        }
        return out;
    }
    let (s, c) = deg.to_radians().sin_cos();
    warp(img, |dx, dy| (dx * c - dy * s, dx * s + dy * c))
}

fn rotate_quarter(img: &Image) -> Image {
    let n = img.width();
    let mut out = img.clone();
    for y in 0..n {
        for x in 0..n {
            out.set_pixel(y, x, img.pixel(x, n - 1 - y));
        }
    }
    out
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    (if i >= n { period - i } else { i }) as usize
}

fn bilinear(img: &Image, sx: f64, sy: f64) -> [f32; 3] {
    let (x0, y0) = (sx.floor(), sy.floor());
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = [0.0f64; 3];
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let p = img.pixel(reflect(y0 + dy, img.height()), reflect(x0 + dx, img.width()));
            for c in 0..3 {
                acc[c] += wgt * p[c] as f64;
            }
        }
    }
    acc.map(|v| v as f32)
}

/// Inverse-mapped resampling about the image centre: `src(dx, dy)` gives the
/// source offset for an output offset (y pointing down).
fn warp(img: &Image, src: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x as f64 - cx, y as f64 - cy);
            out.set_pixel(y, x, bilinear(img, sx + cx, sy + cy));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn marker() -> Image {
        // a b / c d with distinct colours
        Image::new(
            2,
            2,
            vec![0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.3, 0.0, 0.0, 0.4, 0.0, 0.0],
        )
    }

    #[test]
    fn quarter_turn_permutes_marker() {
        let r = rotate(&marker(), 90.0);
        let red: Vec<f32> = r.data().chunks(3).map(|p| p[0]).collect();
        assert_eq!(red, vec![0.2, 0.4, 0.1, 0.3]);
        let r = rotate(&marker(), -90.0);
        let red: Vec<f32> = r.data().chunks(3).map(|p| p[0]).collect();
        assert_eq!(red, vec![0.3, 0.1, 0.4, 0.2]);
    }

    #[test]
    fn bilinear_path_agrees_with_permutation_near_quarter_turn() {
        let mut img = Image::filled(5, 5, [0.0; 3]);
        for i in 0..25 {
            img.set_pixel(i / 5, i % 5, [i as f32 / 25.0, 0.5, 0.0]);
        }
        let exact = rotate(&img, 90.0);
        let near = rotate(&img, 90.0 + 1e-9);
        for (a, b) in exact.data().iter().zip(near.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn unit_scale_and_zero_shear_are_identity() {
        let mut img = Image::filled(6, 6, [0.0; 3]);
        img.set_pixel(1, 4, [1.0, 0.5, 0.25]);
        let ops = AugmentOps {
            scale: Some(1.0),
            shear: Some(0.0),
            ..Default::default()
        };
        assert_eq!(ops.apply(&img), img);
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            rotation_range: [-200.0, 0.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            scale_range: [0.0, 1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let p = AugmentPolicy::default();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<_> = (0..20).map(|_| p.sample(&mut r)).collect();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<_> = (0..20).map(|_| p.sample(&mut r)).collect();
        assert_eq!(a, b);
    }
}
