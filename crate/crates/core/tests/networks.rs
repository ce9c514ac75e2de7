mod common;

use apgan::attention::{snl_forward_naive, AttentionParams, FeatureMap};
use apgan::autograd::Var;
use apgan::networks::layers::{EqConv2d, EqLinear, SnlLayer};
use apgan::networks::{
    pixel_norm, Discriminator, FadeState, Generator, LatentCode, Layout, NetworkError, NetworkSpec, ParamSet,
};
use apgan::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(final_res: u32) -> NetworkSpec {
    NetworkSpec::with_channels(final_res, 8, 7, 16, 8).unwrap()
}

fn randomize(p: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    // zero-initialised tensors (biases, W_v) would hide wiring mistakes
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn codes(n: usize, latent: usize, rng: &mut ChaCha8Rng) -> Vec<LatentCode> {
    (0..n).map(|i| LatentCode::sample(latent, i % 7, rng)).collect()
}

fn images(n: usize, r: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(vec![n, 3, r, r], (0..n * 3 * r * r).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn generator_fade_endpoints_and_midpoint() {
    let s = spec(16).with_attention(&[8]).unwrap();
    let g = Generator::new(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = g.layout().init::<f64>(&mut rng);
    randomize(&mut p, &mut rng);
    let cs = codes(3, 8, &mut rng);
    for stage in 1..3 {
        let at = |alpha| g.generate(&p, &cs, FadeState { stage_index: stage, alpha }).unwrap();
        let previous = g.generate(&p, &cs, FadeState::stable(stage - 1)).unwrap();
        // alpha = 0 is exactly the upsampled previous-stage output
        assert_eq!(at(0.0), previous.upsample2x());
        let (a0, a1, mid) = (at(0.0), at(1.0), at(0.5));
        assert_ne!(a0, a1);
        for i in 0..mid.len() {
            let avg = 0.5 * (a0.data()[i] + a1.data()[i]);
            assert!((mid.data()[i] - avg).abs() < 1e-6);
        }
    }
}

#[test]
fn discriminator_fade_endpoint_is_previous_stage_on_downsampled_input() {
    let s = spec(16).with_attention(&[16]).unwrap();
    let d = Discriminator::new(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = d.layout().init::<f64>(&mut rng);
    randomize(&mut p, &mut rng);
    let labels = [0, 3, 6, 2];
    for stage in 1..3 {
        let r = 4 << stage;
        let x = images(4, r, &mut rng);
        let old = d
            .score(&p, &x, &labels, FadeState { stage_index: stage, alpha: 0.0 })
            .unwrap();
        let previous = d.score(&p, &x.downsample2x(), &labels, FadeState::stable(stage - 1)).unwrap();
        assert_eq!(old, previous);
        let new = d.score(&p, &x, &labels, FadeState::stable(stage)).unwrap();
        assert_ne!(old, new);
    }
}

#[test]
fn attention_sits_after_upsample_and_before_downsample() {
    let s = spec(32).with_attention(&[16]).unwrap();
    let g = Generator::new(&s).unwrap().describe();
    let i = g.iter().position(|o| o == "s2.attention").unwrap();
    assert_eq!(&g[i - 1..=i + 1], ["s2.upsample", "s2.attention", "s2.conv1"]);
    assert_eq!(g.iter().filter(|o| o.ends_with("attention")).count(), 1);
    let d = Discriminator::new(&s).unwrap().describe();
    let i = d.iter().position(|o| o == "s2.attention").unwrap();
    assert_eq!(&d[i - 1..=i + 1], ["s2.conv2", "s2.attention", "s2.downsample"]);

    let mut only_g = s.clone();
    only_g.attention_in_discriminator = false;
    assert!(Discriminator::new(&only_g).unwrap().describe().iter().all(|o| !o.contains("attention")));
    let plain = Generator::new(&spec(32)).unwrap().describe();
    assert!(plain.iter().all(|o| !o.contains("attention")));
}

#[test]
fn output_shapes_at_every_stage() {
    let s = spec(32).with_attention(&[8]).unwrap();
    let g = Generator::new(&s).unwrap();
    let d = Discriminator::new(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gp = g.layout().init::<f32>(&mut rng);
    let dp = d.layout().init::<f32>(&mut rng);
    let cs = codes(2, 8, &mut rng);
    for stage in 0..4 {
        let r = 4usize << stage;
        let fade = FadeState { stage_index: stage, alpha: 0.3 };
        let img = g.generate(&gp, &cs, fade).unwrap();
        assert_eq!(img.shape(), [2, 3, r, r]);
        let score = d.score(&dp, &img, &[0, 1], fade).unwrap();
        assert_eq!(score.shape(), [2]);
    }
}

#[test]
fn wrong_resolution_is_rejected() {
    let s = spec(16);
    let d = Discriminator::new(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = d.layout().init::<f32>(&mut rng);
    let err = d
        .score(&p, &Tensor::zeros(&[1, 3, 8, 8]), &[0], FadeState::stable(2))
        .unwrap_err();
    assert_eq!(
        err,
        NetworkError::Resolution {
            expected: 16,
            actual_h: 8,
            actual_w: 8
        }
    );
    assert!(matches!(
        d.score(&p, &Tensor::zeros(&[1, 3, 4, 4]), &[9], FadeState::stable(0)),
        Err(NetworkError::Label { label: 9, .. })
    ));
}

#[test]
fn discriminator_is_finite_over_many_draws() {
    let s = spec(16).with_attention(&[16]).unwrap();
    let d = Discriminator::new(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = d.layout().init::<f32>(&mut rng);
    let mut seen = 0;
    for _ in 0..40 {
        let x: Tensor<f32> = images(25, 16, &mut rng).cast();
        let labels: Vec<usize> = (0..25).map(|_| rng.random_range(0..7)).collect();
        let out = d.score(&p, &x, &labels, FadeState::stable(2)).unwrap();
        assert!(out.all_finite());
        seen += out.len();
    }
    assert_eq!(seen, 1000);
}

#[test]
fn discriminator_commutes_with_batch_permutation() {
    let s = spec(8).with_attention(&[8]).unwrap();
    let d = Discriminator::new(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = d.layout().init::<f64>(&mut rng);
    randomize(&mut p, &mut rng);
    let x = images(5, 8, &mut rng);
    let labels = [0, 1, 2, 3, 4];
    let perm = [3, 0, 4, 1, 2];
    let per = 3 * 64;
    let mut xp = Vec::new();
    for &i in &perm {
        xp.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let fade = FadeState { stage_index: 1, alpha: 0.4 };
    let a = d.score(&p, &x, &labels, fade).unwrap();
    let b = d.score(&p, &Tensor::new(x.shape().to_vec(), xp), &lp, fade).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert!((b.data()[k] - a.data()[i]).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equalized_conv_matches_prescaled_weights(seed in any::<u64>(), cin in 1usize..5, cout in 1usize..5, k in prop::sample::select(vec![1usize, 3])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layout = Layout::default();
        let layer = EqConv2d::new(&mut layout, "c", cin, cout, k, std::f64::consts::SQRT_2);
        let mut p = layout.init::<f64>(&mut rng);
        randomize(&mut p, &mut rng);
        let x = Tensor::new(vec![2, cin, 5, 5], (0..2 * cin * 25).map(|_| rng.random_range(-1.0..1.0)).collect());
        let got = layer.forward(&p.bind_const(), &Var::constant(x.clone()));
        let scale = (2.0 / (cin * k * k) as f64).sqrt();
        let w: Vec<f64> = p.tensors()[0].data().iter().map(|v| v * scale).collect();
        let want = common::naive_conv(&x, &w, p.tensors()[1].data(), cout, k);
        for (a, b) in got.value().data().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn equalized_linear_matches_prescaled_weights(seed in any::<u64>(), cin in 1usize..9, cout in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layout = Layout::default();
        let layer = EqLinear::new(&mut layout, "l", cin, cout, std::f64::consts::SQRT_2);
        let mut p = layout.init::<f64>(&mut rng);
        randomize(&mut p, &mut rng);
        let x: Vec<f64> = (0..3 * cin).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = layer.forward(&p.bind_const(), &Var::constant(Tensor::new(vec![3, cin], x.clone())));
        let scale = (2.0 / cin as f64).sqrt();
        let (w, b) = (p.tensors()[0].data(), p.tensors()[1].data());
        for n in 0..3 {
            for o in 0..cout {
                let want: f64 = b[o] + (0..cin).map(|i| scale * w[o * cin + i] * x[n * cin + i]).sum::<f64>();
                prop_assert!((got.value().data()[n * cout + o] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equalized_attention_matches_prescaled_weights(seed in any::<u64>(), c in 1usize..9, h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layout = Layout::default();
        let layer = SnlLayer::new(&mut layout, "a", c);
        let mut p = layout.init::<f64>(&mut rng);
        randomize(&mut p, &mut rng);
        let fm = FeatureMap::random(c, h, w, &mut rng);
        let got = layer.forward(&p.bind_const(), &Var::constant(fm.to_tensor::<f64>()));
        let scale = (2.0 / c as f64).sqrt();
        let params = AttentionParams::new(
            p.tensors()[0].data().iter().map(|v| v * scale).collect(),
            p.tensors()[1].data().iter().map(|v| v * scale).collect(),
        ).unwrap();
        let want = snl_forward_naive(&fm, &params).unwrap();
        for (a, b) in got.value().data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pixel_norm_output_has_unit_rms(seed in any::<u64>(), c in 1usize..33, scale in 1e-2f64..1e2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![2, c, 3, 3], (0..18 * c).map(|_| scale * rng.random_range(-1.0..1.0)).collect());
        let y = pixel_norm(&Var::constant(x), 1e-8);
        let d = y.value().data();
        for n in 0..2 {
            for pos in 0..9 {
                let ms: f64 = (0..c).map(|ch| d[(n * c + ch) * 9 + pos].powi(2)).sum::<f64>() / c as f64;
                prop_assert!((ms.sqrt() - 1.0).abs() < 1e-3);
            }
        }
    }
}

#[test]
fn fresh_attention_block_is_identity_inside_the_generator() {
    let with = spec(16).with_attention(&[8]).unwrap();
    let without = spec(16);
    let gw = Generator::new(&with).unwrap();
    let g0 = Generator::new(&without).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pw = gw.layout().init::<f64>(&mut rng);
    // copy shared parameters by name; the attention block keeps its zero W_v
    let mut p0 = ParamSet::default();
    for spec in g0.layout().specs() {
        p0.push(spec.name.clone(), pw.get(&spec.name).unwrap().clone());
    }
    let cs = codes(2, 8, &mut rng);
    let a = gw.generate(&pw, &cs, FadeState::stable(2)).unwrap();
    let b = g0.generate(&p0, &cs, FadeState::stable(2)).unwrap();
    assert_eq!(a, b);
}
