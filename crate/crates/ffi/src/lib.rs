//! C interface to the APGAN core: load a trained generator from a checkpoint
//! and sample images from it, run the attention block on raw buffers, and
//! query the progressive-growing schedule.
//!
//! Every fallible call returns an [`ApganStatus`]. On failure a description is
//! stored per thread and can be read with [`apgan_last_error`]. Handles are
//! opaque and must be released with their `_free` function. Panics never cross
//! the boundary; they surface as [`ApganStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use apgan::attention::{snl_forward, AttentionParams, FeatureMap};
use apgan::data::Image;
use apgan::networks::{FadeState, Generator, LatentCode, ParamSet};
use apgan::tensor::Tensor;
use apgan::train::{paper_batch_map, schedule_at, Checkpoint, CheckpointError, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    Internal = 5,
}

/// A generator restored from a checkpoint.
pub struct ApganGenerator {
    generator: Generator,
    params: ParamSet<f32>,
    config: TrainConfig,
    step: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ApganGeneratorInfo {
    /// Side length of generated images.
    pub resolution: u32,
    pub n_classes: u32,
    pub latent_dim: u32,
    /// Training step at which the checkpoint was written.
    pub step: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ApganSchedule {
    pub stage_index: u32,
    pub resolution: u32,
    pub alpha: f64,
    pub batch_size: u32,
    /// 1 while a new stage is fading in.
    pub fading: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(ApganStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(ApganStatus::InvalidArgument, msg.into())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ApganStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ApganStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal error: {msg}"));
            ApganStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(ApganStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Message for the most recent failure on this thread, or null if the last
/// call succeeded. Valid until the next call into this library.
#[no_mangle]
pub extern "C" fn apgan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file and keeps only the generator.
///
/// # Safety
/// `path` must be a valid nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apgan_generator_open(path: *const c_char, out: *mut *mut ApganGenerator) -> ApganStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        *out = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::invalid("path is not UTF-8"))?;
        let ck = Checkpoint::load(Path::new(path)).map_err(|e| {
            let status = match e {
                CheckpointError::Io { .. } => ApganStatus::Io,
                _ => ApganStatus::CorruptCheckpoint,
            };
            Failure(status, format!("{path}: {e}"))
        })?;
        let generator = Generator::new(&ck.spec).map_err(|e| Failure(ApganStatus::CorruptCheckpoint, e.to_string()))?;
        let handle = ApganGenerator {
            generator,
            params: ck.generator,
            config: ck.config,
            step: ck.step,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a generator. Null is ignored.
///
/// # Safety
/// `g` must come from [`apgan_generator_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apgan_generator_free(g: *mut ApganGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// # Safety
/// `g` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apgan_generator_info(g: *const ApganGenerator, out: *mut ApganGeneratorInfo) -> ApganStatus {
    guard(|| {
        non_null(g, "generator")?;
        non_null(out, "out")?;
        let g = &*g;
        let spec = g.generator.spec();
        *out = ApganGeneratorInfo {
            resolution: spec.final_resolution(),
            n_classes: spec.n_classes as u32,
            latent_dim: spec.latent_dim as u32,
            step: g.step,
        };
        Ok(())
    })
}

fn write_images(g: &ApganGenerator, codes: &[LatentCode], out: &mut [f32]) -> Result<(), Failure> {
    let spec = g.generator.spec();
    let fade = FadeState::stable(spec.stages.len() - 1);
    let r = spec.final_resolution() as usize;
    let per = 3 * r * r;
    for (chunk, dst) in codes.chunks(32).zip(out.chunks_mut(32 * per)) {
        let t = g
            .generator
            .generate(&g.params, chunk, fade)
            .map_err(|e| Failure::invalid(e.to_string()))?;
        for (i, img) in dst.chunks_mut(per).enumerate() {
            let one = Tensor::new(vec![3, r, r], t.data()[i * per..(i + 1) * per].to_vec());
            img.copy_from_slice(Image::from_gan_tensor(&one).data());
        }
    }
    Ok(())
}

fn check_out(g: &ApganGenerator, n: usize, out_len: usize) -> Result<(), Failure> {
    let r = g.generator.spec().final_resolution() as usize;
    let need = n * r * r * 3;
    if out_len != need {
        return Err(Failure::invalid(format!("output holds {out_len} floats, need {need}")));
    }
    Ok(())
}

fn read_labels(g: &ApganGenerator, labels: *const u32, n: usize) -> Result<Vec<usize>, Failure> {
    non_null(labels, "labels")?;
    let k = g.generator.spec().n_classes;
    let labels = unsafe { std::slice::from_raw_parts(labels, n) };
    labels
        .iter()
        .map(|&l| {
            let l = l as usize;
            if l < k {
                Ok(l)
            } else {
                Err(Failure::invalid(format!("label {l} out of range for {k} classes")))
            }
        })
        .collect()
}

/// Samples `n` images of the given classes with latent codes drawn from
/// `seed`. `out` receives `n` images, each `H x W x 3` row-major with values
/// in `[0, 1]`; `out_len` must equal `n * H * W * 3`. The same seed and labels
/// always produce the same images.
///
/// # Safety
/// `labels` must point to `n` values and `out` to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn apgan_generator_sample(
    g: *const ApganGenerator,
    labels: *const u32,
    n: usize,
    seed: u64,
    out: *mut f32,
    out_len: usize,
) -> ApganStatus {
    guard(|| {
        non_null(g, "generator")?;
        non_null(out, "out")?;
        let g = &*g;
        let labels = read_labels(g, labels, n)?;
        check_out(g, n, out_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = g.generator.spec().latent_dim;
        let codes: Vec<LatentCode> = labels.iter().map(|&l| LatentCode::sample(d, l, &mut rng)).collect();
        write_images(g, &codes, std::slice::from_raw_parts_mut(out, out_len))
    })
}

/// Like [`apgan_generator_sample`] with caller-supplied latent vectors:
/// `z` holds `n * latent_dim` values, one row per image.
///
/// # Safety
/// `z` must point to `n * latent_dim` floats, `labels` to `n` values and
/// `out` to `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn apgan_generator_generate(
    g: *const ApganGenerator,
    z: *const f32,
    labels: *const u32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> ApganStatus {
    guard(|| {
        non_null(g, "generator")?;
        non_null(z, "z")?;
        non_null(out, "out")?;
        let g = &*g;
        let labels = read_labels(g, labels, n)?;
        check_out(g, n, out_len)?;
        let d = g.generator.spec().latent_dim;
        let z = std::slice::from_raw_parts(z, n * d);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Failure::invalid("latent vectors contain non-finite values"));
        }
        let codes: Vec<LatentCode> = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LatentCode {
                z: z[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect(),
                label,
            })
            .collect();
        write_images(g, &codes, std::slice::from_raw_parts_mut(out, out_len))
    })
}

/// Schedule state of the checkpoint's training run after `images_shown`
/// real images.
///
/// # Safety
/// `g` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apgan_generator_schedule_at(
    g: *const ApganGenerator,
    images_shown: u64,
    out: *mut ApganSchedule,
) -> ApganStatus {
    guard(|| {
        non_null(g, "generator")?;
        non_null(out, "out")?;
        *out = to_c_schedule(&(*g).config, images_shown);
        Ok(())
    })
}

fn to_c_schedule(cfg: &TrainConfig, n: u64) -> ApganSchedule {
    let s = schedule_at(cfg, n);
    ApganSchedule {
        stage_index: s.stage_index as u32,
        resolution: s.resolution,
        alpha: s.alpha,
        batch_size: s.batch_size as u32,
        fading: s.fading as u8,
    }
}

/// Schedule state for a run that grows from 4x4 to `final_resolution` with
/// the full-scale batch sizes (256 at 4x4 down to 8 at 256x256).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apgan_schedule_at(
    images_per_phase: u64,
    total_images: u64,
    final_resolution: u32,
    images_shown: u64,
    out: *mut ApganSchedule,
) -> ApganStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = TrainConfig {
            images_per_phase,
            total_images,
            final_resolution,
            batch_by_resolution: paper_batch_map(),
            ..Default::default()
        };
        cfg.validate().map_err(|e| Failure::invalid(e.to_string()))?;
        *out = to_c_schedule(&cfg, images_shown);
        Ok(())
    })
}

/// Simplified non-local attention on one `C x H x W` map (channel-major):
/// one shared softmax over positions of the `w_k` logits, a `C x C` value
/// transform `w_v` (row-major, out x in) and a residual connection.
///
/// # Safety
/// `x` and `out` must hold `C*H*W` doubles, `w_k` `C`, and `w_v` `C*C`.
#[no_mangle]
pub unsafe extern "C" fn apgan_snl_forward(
    x: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    w_k: *const f64,
    w_v: *const f64,
    out: *mut f64,
) -> ApganStatus {
    guard(|| {
        non_null(x, "x")?;
        non_null(w_k, "w_k")?;
        non_null(w_v, "w_v")?;
        non_null(out, "out")?;
        let len = channels
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Failure::invalid("feature map size overflows"))?;
        let bad = |e: apgan::attention::AttentionError| Failure::invalid(e.to_string());
        let map = FeatureMap::new(channels, height, width, std::slice::from_raw_parts(x, len).to_vec()).map_err(bad)?;
        let params = AttentionParams::new(
            std::slice::from_raw_parts(w_k, channels).to_vec(),
            std::slice::from_raw_parts(w_v, channels * channels).to_vec(),
        )
        .map_err(bad)?;
        let y = snl_forward(&map, &params).map_err(bad)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(y.data());
        Ok(())
    })
}
