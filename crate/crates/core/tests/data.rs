mod common;

use apgan::data::{
    augment, center_crop_resize, denormalize_from_classifier, flip_horizontal, flip_vertical, load_image_folder,
    make_toy_dataset, normalize_for_classifier, rotate, split_stratified, AugmentOps, AugmentPolicy, DataError, Image,
    LabeledDataset, Provenance, ToySpec, ISIC_CLASS_COUNTS,
};
use apgan::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image_strategy() -> impl Strategy<Value = Image> {
    (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f32..=1.0, h * w * 3).prop_map(move |d| Image::new(h, w, d))
    })
}

proptest! {
    #[test]
    fn flips_are_exact_involutions(img in image_strategy()) {
        prop_assert_eq!(flip_horizontal(&flip_horizontal(&img)), img.clone());
        prop_assert_eq!(flip_vertical(&flip_vertical(&img)), img.clone());
        let forced = AugmentOps { h_flip: true, v_flip: true, ..Default::default() };
        prop_assert_eq!(forced.apply(&forced.apply(&img)), img);
    }

    #[test]
    fn augment_keeps_label_and_range(img in image_strategy(), label in 0usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, l) = augment(&img, label, &AugmentPolicy::default(), &mut rng);
        prop_assert_eq!(l, label);
        prop_assert_eq!((out.height(), out.width()), (img.height(), img.width()));
        prop_assert!(out.is_valid());
    }

    #[test]
    fn normalization_round_trips(img in image_strategy()) {
        let t: Tensor<f64> = normalize_for_classifier(&img);
        let back = denormalize_from_classifier(&t);
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}

#[test]
fn sampled_rotation_angles_stay_in_range() {
    let policy = AugmentPolicy {
        probability: 1.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut lo, mut hi) = (f64::MAX, f64::MIN);
    for _ in 0..10_000 {
        let a = policy.sample(&mut rng).rotation_deg.unwrap();
        assert!((-90.0..=90.0).contains(&a), "{a}");
        lo = lo.min(a);
        hi = hi.max(a);
    }
    // the draws should also cover the range, not just respect it
    assert!(lo < -89.0 && hi > 89.0, "{lo} {hi}");
}

#[test]
fn application_rate_follows_probability() {
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    let hits = (0..n).filter(|_| policy.sample(&mut rng).h_flip).count();
    let rate = hits as f64 / n as f64;
    // binomial sd is 0.005 at p = 0.5
    assert!((rate - 0.5).abs() < 0.025, "{rate}");
}

#[test]
fn centred_disk_is_rotation_invariant() {
    let n = 32;
    let mut img = Image::filled(n, n, [0.0; 3]);
    let c = (n as f64 - 1.0) / 2.0;
    for y in 0..n {
        for x in 0..n {
            let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            // soft edge so resampling error stays small
            let v = (10.0 - r).clamp(0.0, 1.0) as f32;
            img.set_pixel(y, x, [v, v * 0.5, 0.2]);
        }
    }
    for deg in [17.0, 45.0, -63.0] {
        let out = rotate(&img, deg);
        let mae = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / img.data().len() as f64;
        assert!(mae < 1e-2, "{deg} deg: {mae}");
    }
}

#[test]
fn quarter_turn_moves_marker_pixels() {
    // [[a, b], [c, d]] turned a quarter counter-clockwise is [[b, d], [a, c]]
    let img = Image::new(2, 2, vec![0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.3, 0.0, 0.0, 0.4, 0.0, 0.0]);
    let out = rotate(&img, 90.0);
    let red: Vec<f32> = (0..4).map(|i| out.pixel(i / 2, i % 2)[0]).collect();
    assert_eq!(red, vec![0.2, 0.4, 0.1, 0.3]);
    assert_eq!(rotate(&out, -90.0), img);
}

#[test]
fn crop_resize_examples() {
    let mut img = Image::filled(4, 4, [0.0; 3]);
    for y in 0..4 {
        for x in 0..4 {
            let v = (y * 4 + x) as f32 / 16.0;
            img.set_pixel(y, x, [v, 1.0 - v, 0.5]);
        }
    }
    assert_eq!(center_crop_resize(&img, 4, 4).unwrap(), img);
    let out = center_crop_resize(&img, 4, 2).unwrap();
    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut want = [0.0f64; 3];
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let p = img.pixel(2 * oy + dy, 2 * ox + dx);
            for c in 0..3 {
                want[c] += p[c] as f64 / 4.0;
            }
        }
        let got = out.pixel(oy, ox);
        for c in 0..3 {
            assert!((got[c] as f64 - want[c]).abs() < 1e-6);
        }
    }
    assert!(matches!(center_crop_resize(&img, 5, 2), Err(DataError::Crop { .. })));
}

#[test]
fn classifier_normalization_constants() {
    let one_pixel = |rgb: [f32; 3]| Image::new(1, 1, rgb.to_vec());
    let z: Tensor<f64> = normalize_for_classifier(&one_pixel([0.485, 0.456, 0.406]));
    assert!(z.data().iter().all(|v| v.abs() < 1e-6), "{:?}", z.data());
    let t: Tensor<f64> = normalize_for_classifier(&one_pixel([1.0; 3]));
    let want = [(1.0 - 0.485) / 0.229, (1.0 - 0.456) / 0.224, (1.0 - 0.406) / 0.225];
    for (g, w) in t.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-9);
    }
    assert_eq!(
        want.map(|v| (v * 1000.0).round() / 1000.0),
        [2.249, 2.429, 2.640]
    );
}

fn counted(counts: &[usize]) -> LabeledDataset {
    let mut ds = LabeledDataset::new((0..counts.len()).map(|c| format!("k{c}")).collect());
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            ds.push(Image::filled(1, 1, [i as f32 / n as f32, 0.0, 0.0]), c, Provenance::Real);
        }
    }
    ds
}

#[test]
fn split_ten_per_class() {
    let ds = counted(&[10; 4]);
    let (tr, va) = split_stratified(&ds, 0.2, 3).unwrap();
    assert_eq!(tr.class_histogram(), vec![8; 4]);
    assert_eq!(va.class_histogram(), vec![2; 4]);
    let mut all: Vec<(usize, u32)> = tr
        .images()
        .iter()
        .zip(tr.labels())
        .chain(va.images().iter().zip(va.labels()))
        .map(|(im, &l)| (l, im.data()[0].to_bits()))
        .collect();
    let mut orig: Vec<(usize, u32)> = ds.images().iter().zip(ds.labels()).map(|(im, &l)| (l, im.data()[0].to_bits())).collect();
    all.sort();
    orig.sort();
    assert_eq!(all, orig);
    assert!(matches!(split_stratified(&counted(&[5, 1]), 0.2, 0), Err(DataError::TooFewItems { .. })));
}

#[test]
fn split_of_corpus_counts_is_9514_501() {
    let ds = counted(&ISIC_CLASS_COUNTS);
    let (tr, va) = split_stratified(&ds, 501.0 / 10015.0, 0).unwrap();
    assert_eq!((tr.len(), va.len()), (9514, 501));
    for (c, &n) in ISIC_CLASS_COUNTS.iter().enumerate() {
        let share = n as f64 * 501.0 / 10015.0;
        assert!((va.class_histogram()[c] as f64 - share).abs() <= 1.0);
    }
    let again = split_stratified(&ds, 501.0 / 10015.0, 0).unwrap();
    assert_eq!(again.1, va);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn split_is_disjoint_and_proportional(counts in proptest::collection::vec(2usize..40, 1..6), frac in 0.05f64..0.6, seed in any::<u64>()) {
        let ds = counted(&counts);
        let (tr, va) = split_stratified(&ds, frac, seed).unwrap();
        prop_assert_eq!(tr.len() + va.len(), ds.len());
        for (c, &n) in counts.iter().enumerate() {
            let v = va.class_histogram()[c];
            prop_assert_eq!(tr.class_histogram()[c] + v, n);
            prop_assert!((v as f64 - n as f64 * frac).abs() <= 1.0 + 1e-9);
            prop_assert!(v < n);
        }
    }
}

#[test]
fn folder_of_two_classes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = counted(&[3, 3]);
    apgan::data::save_image_folder(&ds, dir.path()).unwrap();
    let (back, report) = load_image_folder(dir.path(), None).unwrap();
    assert_eq!((back.len(), back.class_histogram()), (6, vec![3, 3]));
    assert_eq!(report.loaded, 6);
    std::fs::create_dir(dir.path().join("k2")).unwrap();
    match load_image_folder(dir.path(), None) {
        Err(DataError::EmptyClass(name)) => assert_eq!(name, "k2"),
        other => panic!("expected empty-class error, got {:?}", other.map(|d| d.0.len())),
    }
}

#[test]
fn corpus_shaped_folder_reproduces_histogram() {
    let dir = tempfile::tempdir().unwrap();
    common::write_isic_standin(dir.path());
    let (ds, _) = load_image_folder(dir.path(), None).unwrap();
    assert_eq!(ds.len(), 10015);
    let by_name = ds.named_histogram();
    for (name, &n) in apgan::data::ISIC_CLASS_NAMES.iter().zip(&ISIC_CLASS_COUNTS) {
        assert_eq!(by_name[*name], n, "{name}");
    }
}

#[test]
fn toy_counts_and_determinism() {
    let spec = ToySpec::scaled(10, 16, 4);
    let a = make_toy_dataset(&spec).unwrap();
    assert_eq!(a, make_toy_dataset(&spec).unwrap());
    // proportional to the corpus histogram up to rounding of each count
    for (n, isic) in a.class_histogram().iter().zip(ISIC_CLASS_COUNTS) {
        assert!((*n as f64 - isic as f64 / 10.0).abs() <= 0.5);
    }
    a.validate().unwrap();
}

#[test]
fn augmentation_stream_is_reproducible() {
    let ds = make_toy_dataset(&ToySpec::scaled(100, 16, 0)).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ds.images()
            .iter()
            .zip(ds.labels())
            .map(|(im, &l)| augment(im, l, &AugmentPolicy::default(), &mut rng))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}
