use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use apgan::attention::{snl_forward_naive, AttentionParams, FeatureMap};
use apgan::data::Image;
use apgan::networks::{FadeState, LatentCode, NetworkSpec};
use apgan::tensor::Tensor;
use apgan::train::{TrainConfig, Trainer};
use apgan_ffi::*;

fn last_error() -> String {
    let p = apgan_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_trainer() -> Trainer {
    let spec = NetworkSpec::with_channels(8, 8, 7, 16, 8).unwrap().with_attention(&[8]).unwrap();
    let cfg = TrainConfig {
        total_images: 640,
        images_per_phase: 160,
        final_resolution: 8,
        batch_by_resolution: [(4, 8), (8, 8)].into_iter().collect(),
        ..Default::default()
    };
    Trainer::new(spec, cfg).unwrap()
}

fn saved_checkpoint(dir: &Path) -> (Trainer, PathBuf) {
    let t = tiny_trainer();
    let path = dir.join("g.ckpt");
    t.checkpoint().save(&path).unwrap();
    (t, path)
}

fn open(path: &Path) -> (ApganStatus, *mut ApganGenerator) {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    let s = unsafe { apgan_generator_open(c.as_ptr(), &mut g) };
    (s, g)
}

#[test]
fn generator_round_trip_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let (trainer, path) = saved_checkpoint(dir.path());
    let (s, g) = open(&path);
    assert_eq!(s, ApganStatus::Ok);
    assert!(apgan_last_error().is_null());

    let mut info = ApganGeneratorInfo::default();
    assert_eq!(unsafe { apgan_generator_info(g, &mut info) }, ApganStatus::Ok);
    assert_eq!((info.resolution, info.n_classes, info.latent_dim, info.step), (8, 7, 8, 0));

    let labels = [0u32, 3, 6];
    let z: Vec<f32> = (0..3 * 8).map(|i| ((i * 37 % 11) as f32 - 5.0) / 4.0).collect();
    let mut out = vec![0f32; 3 * 8 * 8 * 3];
    let s = unsafe { apgan_generator_generate(g, z.as_ptr(), labels.as_ptr(), 3, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, ApganStatus::Ok);

    let codes: Vec<LatentCode> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| LatentCode {
            z: z[i * 8..(i + 1) * 8].iter().map(|&v| v as f64).collect(),
            label: l as usize,
        })
        .collect();
    let t = trainer
        .generator()
        .generate(&trainer.checkpoint().generator, &codes, FadeState::stable(1))
        .unwrap();
    for i in 0..3 {
        let one = Tensor::new(vec![3, 8, 8], t.data()[i * 192..(i + 1) * 192].to_vec());
        assert_eq!(&out[i * 192..(i + 1) * 192], Image::from_gan_tensor(&one).data());
    }
    unsafe { apgan_generator_free(g) };
}

#[test]
fn seeded_sampling_is_repeatable_and_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_checkpoint(dir.path());
    let (_, g) = open(&path);
    let labels = [1u32, 2, 2, 5];
    let sample = |seed| {
        let mut out = vec![0f32; 4 * 192];
        let s = unsafe { apgan_generator_sample(g, labels.as_ptr(), 4, seed, out.as_mut_ptr(), out.len()) };
        assert_eq!(s, ApganStatus::Ok);
        out
    };
    let a = sample(7);
    assert_eq!(a, sample(7));
    assert_ne!(a, sample(8));
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    unsafe { apgan_generator_free(g) };
}

#[test]
fn bad_arguments_report_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_checkpoint(dir.path());

    let (s, g) = open(&dir.path().join("missing.ckpt"));
    assert_eq!(s, ApganStatus::Io);
    assert!(g.is_null());
    assert!(last_error().contains("missing.ckpt"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    assert_eq!(open(&junk).0, ApganStatus::CorruptCheckpoint);

    let mut g = ptr::null_mut();
    assert_eq!(unsafe { apgan_generator_open(ptr::null(), &mut g) }, ApganStatus::NullPointer);
    assert!(last_error().contains("path"));

    let (_, g) = open(&path);
    let mut out = vec![0f32; 192];
    let s = unsafe { apgan_generator_sample(g, [9u32].as_ptr(), 1, 0, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, ApganStatus::InvalidArgument);
    assert!(last_error().contains("label 9"));
    let s = unsafe { apgan_generator_sample(g, [0u32].as_ptr(), 1, 0, out.as_mut_ptr(), 100) };
    assert_eq!(s, ApganStatus::InvalidArgument);
    assert!(last_error().contains("need 192"));
    let mut info = ApganGeneratorInfo::default();
    assert_eq!(unsafe { apgan_generator_info(ptr::null(), &mut info) }, ApganStatus::NullPointer);
    unsafe {
        apgan_generator_free(g);
        apgan_generator_free(ptr::null_mut());
    }
}

#[test]
fn schedule_queries() {
    let mut s = ApganSchedule::default();
    let at = |n, s: &mut ApganSchedule| unsafe { apgan_schedule_at(1000, 20_000, 256, n, s) };
    assert_eq!(at(1250, &mut s), ApganStatus::Ok);
    assert_eq!(
        s,
        ApganSchedule {
            stage_index: 1,
            resolution: 8,
            alpha: 0.25,
            batch_size: 256,
            fading: 1
        }
    );
    at(9100, &mut s);
    assert_eq!((s.stage_index, s.resolution, s.alpha, s.batch_size, s.fading), (5, 128, 0.1, 16, 1));
    at(25_000, &mut s);
    assert_eq!((s.resolution, s.alpha, s.fading), (256, 1.0, 0));
    assert_eq!(unsafe { apgan_schedule_at(0, 20_000, 256, 5, &mut s) }, ApganStatus::InvalidArgument);
    assert!(last_error().contains("images_per_phase"));

    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved_checkpoint(dir.path());
    let (_, g) = open(&path);
    assert_eq!(unsafe { apgan_generator_schedule_at(g, 200, &mut s) }, ApganStatus::Ok);
    assert_eq!((s.stage_index, s.resolution, s.alpha, s.batch_size, s.fading), (1, 8, 0.25, 8, 1));
    unsafe { apgan_generator_free(g) };
}

#[test]
fn attention_on_buffers_matches_reference() {
    let (c, h, w) = (3, 2, 4);
    let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
    let w_k = vec![0.3, -0.8, 0.5];
    let w_v: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) / 6.0).collect();
    let mut out = vec![0.0; x.len()];
    let s = unsafe { apgan_snl_forward(x.as_ptr(), c, h, w, w_k.as_ptr(), w_v.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(s, ApganStatus::Ok);
    let want = snl_forward_naive(
        &FeatureMap::new(c, h, w, x.clone()).unwrap(),
        &AttentionParams::new(w_k.clone(), w_v.clone()).unwrap(),
    )
    .unwrap();
    for (a, b) in out.iter().zip(want.data()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    let mut bad = x.clone();
    bad[0] = f64::NAN;
    let s = unsafe { apgan_snl_forward(bad.as_ptr(), c, h, w, w_k.as_ptr(), w_v.as_ptr(), out.as_mut_ptr()) };
    assert_eq!(s, ApganStatus::InvalidArgument);
    assert!(last_error().contains("non-finite"));
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/apgan.h")).unwrap();
    for name in [
        "apgan_last_error",
        "apgan_generator_open",
        "apgan_generator_free",
        "apgan_generator_info",
        "apgan_generator_sample",
        "apgan_generator_generate",
        "apgan_generator_schedule_at",
        "apgan_schedule_at",
        "apgan_snl_forward",
        "APGAN_STATUS_CORRUPT_CHECKPOINT = 4",
        "typedef struct ApganGenerator ApganGenerator;",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

/// Compiles and runs a small C program against the header and static library
/// when a C compiler is on the path.
#[test]
fn c_program_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let target = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = target.join("libapgan_ffi.a");
    assert!(lib.is_file(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "apgan.h"
int main(void) {
    ApganSchedule s;
    if (apgan_schedule_at(1000, 20000, 256, 3500, &s) != APGAN_STATUS_OK) return 1;
    if (s.resolution != 16 || s.alpha != 0.5 || !s.fading) return 2;
    ApganGenerator *g = 0;
    if (apgan_generator_open("/nonexistent/x.ckpt", &g) != APGAN_STATUS_IO || g) return 3;
    printf("%s\n", apgan_last_error());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&exe).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("x.ckpt"));
}

fn which_cc() -> Result<PathBuf, ()> {
    let path = std::env::var_os("PATH").ok_or(())?;
    std::env::split_paths(&path).map(|d| d.join("cc")).find(|p| p.is_file()).ok_or(())
}
