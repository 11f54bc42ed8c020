//! Property tests for the spec-level invariants.

use proptest::prelude::*;

use drsf_core::dfdr::{self, AffineParams, TaskMode};
use drsf_core::math;
use drsf_core::mdsf::{self, DomainLabel};
use drsf_core::rng::RngStream;
use drsf_core::synth::{apply_style, generate_scene, SceneSpec, StyleTransform};
use drsf_core::tensor::{GradientTape, Tensor};

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // elementwise(a, broadcast(b)) equals elementwise(a, materialized b)
    #[test]
    fn broadcast_matches_materialized(a in finite_vec(24), b in finite_vec(4)) {
        let a_t = Tensor::new(&[2, 3, 4], a.clone()).unwrap();
        let b_t = Tensor::new(&[4], b.clone()).unwrap();
        // materialize b over the leading axes
        let mut full = Vec::with_capacity(24);
        for _ in 0..6 {
            full.extend_from_slice(&b);
        }
        let b_full = Tensor::new(&[2, 3, 4], full).unwrap();
        let mut tape = GradientTape::new();
        let via_broadcast = tape.mul(&a_t, &b_t).unwrap();
        let via_full = tape.mul(&a_t, &b_full).unwrap();
        prop_assert!(via_broadcast
            .values()
            .iter()
            .zip(via_full.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn broadcast_channel_scalars(a in finite_vec(24), b in finite_vec(6)) {
        let a_t = Tensor::new(&[2, 3, 2, 2], a.clone()).unwrap();
        let b_t = Tensor::new(&[2, 3, 1, 1], b.clone()).unwrap();
        let mut full = Vec::with_capacity(24);
        for &s in &b {
            full.extend_from_slice(&[s, s, s, s]);
        }
        let b_full = Tensor::new(&[2, 3, 2, 2], full).unwrap();
        let mut tape = GradientTape::new();
        let via_broadcast = tape.add(&a_t, &b_t).unwrap();
        let via_full = tape.add(&a_t, &b_full).unwrap();
        prop_assert!(via_broadcast
            .values()
            .iter()
            .zip(via_full.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // softplus is positive and monotone nondecreasing on [-100, 100]
    #[test]
    fn softplus_positive_everywhere(x in -100.0f64..100.0) {
        prop_assert!(math::softplus(x) > 0.0);
    }

    // decouple reconstruction and reassembly complementarity
    #[test]
    fn decouple_reconstructs(
        vals in finite_vec(2 * 2 * 3 * 3),
        gamma in prop::collection::vec(-3.0f64..3.0, 2),
        beta in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let f = Tensor::new(&[2, 2, 3, 3], vals).unwrap();
        let affine = AffineParams {
            gamma: Tensor::new(&[2], gamma).unwrap(),
            beta: Tensor::new(&[2], beta).unwrap(),
            epsilon: 1e-5,
        };
        let mut tape = GradientTape::new();
        let dec = dfdr::decouple(&mut tape, &f, &affine).unwrap();
        let recon = tape.add(&dec.f_pri, &dec.f_sha).unwrap();
        prop_assert!(recon.max_abs_diff(&f).unwrap() < 1e-9);
    }

    #[test]
    fn reassembly_complementary(
        pri in finite_vec(12),
        sha in finite_vec(12),
        v in prop::collection::vec(0.001f64..0.999, 3),
    ) {
        let dec = dfdr::DecoupledFeatures {
            f_pri: Tensor::new(&[1, 3, 2, 2], pri.clone()).unwrap(),
            f_sha: Tensor::new(&[1, 3, 2, 2], sha.clone()).unwrap(),
            mu: Tensor::zeros(&[1, 3]),
            sigma: Tensor::full(&[1, 3], 1.0).unwrap(),
        };
        let att = Tensor::new(&[1, 3], v).unwrap();
        let mut tape = GradientTape::new();
        let rea = dfdr::reassemble(&mut tape, &dec, &att).unwrap();
        for i in 0..12 {
            let total = rea.gain.values()[i] + rea.interference.values()[i];
            let expect = 2.0 * pri[i] + sha[i];
            prop_assert!((total - expect).abs() < 1e-9);
        }
        // gain and interference both sit inside the segment spanned by
        // f_pri and f_pri + f_sha
        for i in 0..12 {
            let lo = pri[i].min(pri[i] + sha[i]) - 1e-12;
            let hi = pri[i].max(pri[i] + sha[i]) + 1e-12;
            prop_assert!(rea.gain.values()[i] >= lo && rea.gain.values()[i] <= hi);
        }
    }

    // fused features stay in the elementwise interval hull; labels stay
    // distributions
    #[test]
    fn fusion_convexity(
        a in finite_vec(8),
        b in finite_vec(8),
        lambda in 0.001f64..0.999,
    ) {
        let x = Tensor::new(&[2, 4], a.clone()).unwrap();
        let y = Tensor::new(&[2, 4], b.clone()).unwrap();
        let mut tape = GradientTape::new();
        let fused = mdsf::fuse_features(&mut tape, &x, &y, lambda).unwrap();
        for i in 0..8 {
            let lo = a[i].min(b[i]) - 1e-12;
            let hi = a[i].max(b[i]) + 1e-12;
            prop_assert!(fused.values()[i] >= lo && fused.values()[i] <= hi);
        }
        let s = DomainLabel::one_hot(0, 3).unwrap();
        let p = DomainLabel::one_hot(2, 3).unwrap();
        let l = mdsf::fuse_labels(&s, &p, lambda).unwrap();
        let sum: f64 = l.distribution().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(l.distribution().iter().all(|&v| v >= 0.0));
    }

    // 0 <= prediction entropy <= ln(classes)
    #[test]
    fn entropy_bounds(raw in prop::collection::vec(0.01f64..10.0, 4 * 5)) {
        let mut vals = raw.clone();
        for row in vals.chunks_mut(5) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let probs = Tensor::new(&[4, 5], vals).unwrap();
        let mut tape = GradientTape::new();
        let h = dfdr::prediction_entropy(&mut tape, &probs, TaskMode::Classification)
            .unwrap()
            .item()
            .unwrap();
        prop_assert!(h >= 0.0);
        prop_assert!(h <= math::ln(5.0) + 1e-12);
    }

    // style transforms never touch labels and keep pixels in [0,1]
    #[test]
    fn style_transforms_preserve_labels(
        scene_seed in 0u64..1000,
        style_seed in 0u64..1000,
        brightness in -0.5f64..0.3,
        gain in 0.3f64..1.3,
        fog in 0.0f64..0.9,
        noise in 0.0f64..0.1,
    ) {
        let spec = SceneSpec::default();
        let mut rng = RngStream::new(scene_seed);
        let (image, labels) = generate_scene(&spec, &mut rng);
        let t = StyleTransform {
            brightness_shift: brightness,
            channel_gains: [gain, gain * 0.9, gain * 1.1],
            fog_alpha: fog,
            fog_color: [0.8, 0.8, 0.85],
            noise_sigma: noise,
            seed: style_seed,
            ..StyleTransform::identity("prop")
        };
        let mut style_rng = RngStream::new(style_seed);
        let styled = apply_style(&image, &t, &mut style_rng);
        // labels are untouched by construction; pixel range is clamped
        let mut rng2 = RngStream::new(scene_seed);
        let (_, labels_again) = generate_scene(&spec, &mut rng2);
        prop_assert_eq!(labels, labels_again);
        prop_assert!(styled.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn softplus_monotone_on_grid() {
    let mut prev = math::softplus(-100.0);
    assert!(prev > 0.0);
    for i in 1..=2000 {
        let x = -100.0 + i as f64 * 0.1;
        let v = math::softplus(x);
        assert!(v >= prev, "softplus not monotone at x={x}");
        prev = v;
    }
}

#[test]
fn normalization_fixed_point() {
    // construct f whose per-instance-channel spatial mean is beta and
    // std is |gamma| (with eps = 0): decouple must return f_pri == f
    let (n, c, h, w) = (2usize, 2usize, 4usize, 4usize);
    let gamma = [1.5f64, 0.7];
    let beta = [-0.3f64, 2.0];
    let mut vals = vec![0.0f64; n * c * h * w];
    // half the pixels at beta - gamma, half at beta + gamma → mean beta,
    // population std |gamma|
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for p in 0..h * w {
                let sign = if p % 2 == 0 { -1.0 } else { 1.0 };
                vals[base + p] = beta[ci] + sign * gamma[ci];
            }
        }
    }
    let f = Tensor::new(&[n, c, h, w], vals).unwrap();
    let affine = AffineParams {
        gamma: Tensor::new(&[c], gamma.to_vec()).unwrap(),
        beta: Tensor::new(&[c], beta.to_vec()).unwrap(),
        epsilon: 0.0,
    };
    let mut tape = GradientTape::new();
    let dec = dfdr::decouple(&mut tape, &f, &affine).unwrap();
    assert!(dec.f_pri.max_abs_diff(&f).unwrap() < 1e-12);
    assert!(dec.f_sha.values().iter().all(|&v| v.abs() < 1e-12));
}
