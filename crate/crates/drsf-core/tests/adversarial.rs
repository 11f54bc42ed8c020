//! Optimization-direction sanity checks for the adversarial pathway.

use std::collections::BTreeMap;

use drsf_core::mdsf::{
    adversarial_loss, domain_classifier_forward, DomainClassifierParams, DomainLabel, FusedBatch,
    FusionIndex, GrlConfig,
};
use drsf_core::optim::{sgd_step, ParamSet};
use drsf_core::rng::RngStream;
use drsf_core::tensor::{GradientTape, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn classifier_set(rng: &mut RngStream, c: usize, hidden: usize, domains: usize) -> ParamSet {
    let mut set = ParamSet::new();
    set.add("hidden.weight", rand_tensor(&[c, hidden], rng)).unwrap();
    set.add("hidden.bias", Tensor::zeros(&[hidden])).unwrap();
    set.add("output.weight", rand_tensor(&[hidden, domains], rng)).unwrap();
    set.add("output.bias", Tensor::zeros(&[domains])).unwrap();
    set
}

fn loss_on(set: &ParamSet, feats: &[Tensor], labels: &[DomainLabel], grl_factor: f64) -> f64 {
    let mut tape = GradientTape::new();
    let binding = set.bind(&mut tape);
    let params = DomainClassifierParams {
        hidden_w: binding.leaf(drsf_core::optim::ParamId(0)).clone(),
        hidden_b: binding.leaf(drsf_core::optim::ParamId(1)).clone(),
        out_w: binding.leaf(drsf_core::optim::ParamId(2)).clone(),
        out_b: binding.leaf(drsf_core::optim::ParamId(3)).clone(),
    };
    let fused = FusedBatch {
        features: feats[2].clone(),
        labels: vec![
            DomainLabel::new(vec![0.5, 0.5]).unwrap();
            feats[2].shape()[0]
        ],
        lambda_used: 0.5,
        domain_index: FusionIndex::Averaged,
    };
    adversarial_loss(
        &mut tape,
        &feats[0],
        &feats[1..2],
        &fused,
        &labels[0],
        &labels[1..2],
        &params,
        &GrlConfig::new(grl_factor).unwrap(),
    )
    .unwrap()
    .item()
    .unwrap()
}

/// One classifier-only optimizer step (GRL factor 0, frozen features)
/// decreases the adversarial loss; more steps keep decreasing it.
#[test]
fn classifier_steps_strictly_decrease_adversarial_loss() {
    let mut rng = RngStream::new(77);
    let c = 4;
    let mut set = classifier_set(&mut rng, c, 8, 2);
    // separable fixed features: domains differ in channel means
    let src = rand_tensor(&[6, c, 2, 2], &mut rng);
    let shifted: Vec<f64> = src.values().iter().map(|v| v + 1.5).collect();
    let pseudo = Tensor::new(&[6, c, 2, 2], shifted).unwrap();
    let fused_f = rand_tensor(&[6, c, 2, 2], &mut rng);
    let feats = [src, pseudo, fused_f];
    let labels = [
        DomainLabel::one_hot(0, 2).unwrap(),
        DomainLabel::one_hot(1, 2).unwrap(),
    ];

    let mut prev = loss_on(&set, &feats, &labels, 0.0);
    for step in 0..5 {
        // gradient step on the classifier parameters only
        let mut tape = GradientTape::new();
        let binding = set.bind(&mut tape);
        let params = DomainClassifierParams {
            hidden_w: binding.leaf(drsf_core::optim::ParamId(0)).clone(),
            hidden_b: binding.leaf(drsf_core::optim::ParamId(1)).clone(),
            out_w: binding.leaf(drsf_core::optim::ParamId(2)).clone(),
            out_b: binding.leaf(drsf_core::optim::ParamId(3)).clone(),
        };
        let fused = FusedBatch {
            features: feats[2].clone(),
            labels: vec![DomainLabel::new(vec![0.5, 0.5]).unwrap(); 6],
            lambda_used: 0.5,
            domain_index: FusionIndex::Averaged,
        };
        let loss = adversarial_loss(
            &mut tape,
            &feats[0],
            &feats[1..2],
            &fused,
            &labels[0],
            &labels[1..2],
            &params,
            &GrlConfig::new(0.0).unwrap(),
        )
        .unwrap();
        let grads = {
            let g = tape.backward(&loss).unwrap();
            set.gradient_map(&binding, &g)
        };
        sgd_step(&mut set, &grads, 0.05, 0.0).unwrap();
        let now = loss_on(&set, &feats, &labels, 0.0);
        assert!(now < prev, "step {step}: loss went {prev} -> {now}");
        prev = now;
    }
}

/// With GRL factor > 0, the gradient on the features has the opposite sign
/// of the classifier-improving direction on a 1-D probe.
#[test]
fn grl_reverses_feature_gradient_direction() {
    let mut rng = RngStream::new(88);
    let c = 3;
    let set = classifier_set(&mut rng, c, 4, 2);
    let probe = rand_tensor(&[4, c, 2, 2], &mut rng);
    let pseudo = rand_tensor(&[4, c, 2, 2], &mut rng);
    let labels = [
        DomainLabel::one_hot(0, 2).unwrap(),
        DomainLabel::one_hot(1, 2).unwrap(),
    ];

    let feature_grad = |factor: f64| -> Vec<f64> {
        let mut tape = GradientTape::new();
        let binding = set.bind(&mut tape);
        let params = DomainClassifierParams {
            hidden_w: binding.leaf(drsf_core::optim::ParamId(0)).clone(),
            hidden_b: binding.leaf(drsf_core::optim::ParamId(1)).clone(),
            out_w: binding.leaf(drsf_core::optim::ParamId(2)).clone(),
            out_b: binding.leaf(drsf_core::optim::ParamId(3)).clone(),
        };
        let probe_leaf = tape.leaf(&probe, true);
        let fused = FusedBatch {
            features: pseudo.clone(),
            labels: vec![DomainLabel::new(vec![0.5, 0.5]).unwrap(); 4],
            lambda_used: 0.5,
            domain_index: FusionIndex::Averaged,
        };
        let loss = adversarial_loss(
            &mut tape,
            &probe_leaf,
            &[pseudo.clone()],
            &fused,
            &labels[0],
            &labels[1..2],
            &params,
            &GrlConfig::new(factor).unwrap(),
        )
        .unwrap();
        let grads = tape.backward(&loss).unwrap();
        grads.get_or_zeros(&probe_leaf).values().to_vec()
    };
    // factor 0 removes the feature gradient entirely
    let g0 = feature_grad(0.0);
    assert!(g0.iter().all(|&v| v == 0.0));
    // the classifier-improving direction is the factor-(-1) gradient; with
    // reversal the signs flip exactly
    let g_pos = feature_grad(1.0);
    let g_neg = feature_grad(2.0);
    assert!(g_pos.iter().any(|&v| v != 0.0));
    for (a, b) in g_pos.iter().zip(&g_neg) {
        assert_eq!(*b, 2.0 * a, "factor scales the reversed gradient");
    }
    // direct check of the sign flip against the forward objective: moving
    // along -g_pos must *increase* the classifier loss (features made
    // harder to classify), since g_pos is already reversed
    let step = 1e-4;
    let moved: Vec<f64> = probe
        .values()
        .iter()
        .zip(&g_pos)
        .map(|(v, g)| v - step * g)
        .collect();
    let probe2 = Tensor::new(probe.shape(), moved).unwrap();
    let loss_at = |p: &Tensor| -> f64 {
        let mut tape = GradientTape::new();
        let binding = set.bind(&mut tape);
        let params = DomainClassifierParams {
            hidden_w: binding.leaf(drsf_core::optim::ParamId(0)).clone(),
            hidden_b: binding.leaf(drsf_core::optim::ParamId(1)).clone(),
            out_w: binding.leaf(drsf_core::optim::ParamId(2)).clone(),
            out_b: binding.leaf(drsf_core::optim::ParamId(3)).clone(),
        };
        let logits = domain_classifier_forward(&mut tape, p, &params).unwrap();
        let mut t = Vec::new();
        for _ in 0..4 {
            t.extend_from_slice(labels[0].distribution());
        }
        let targets = Tensor::new(&[4, 2], t).unwrap();
        tape.cross_entropy_soft(&logits, &targets).unwrap().item().unwrap()
    };
    let before = loss_at(&probe);
    let after = loss_at(&probe2);
    assert!(
        after > before,
        "descending the reversed gradient should raise the classifier term ({before} -> {after})"
    );
}

/// A BTreeMap gradient map covers all classifier parameters.
#[test]
fn classifier_gradient_map_covers_all_params() {
    let mut rng = RngStream::new(99);
    let set = classifier_set(&mut rng, 3, 4, 2);
    let feats = rand_tensor(&[4, 3, 2, 2], &mut rng);
    let mut tape = GradientTape::new();
    let binding = set.bind(&mut tape);
    let params = DomainClassifierParams {
        hidden_w: binding.leaf(drsf_core::optim::ParamId(0)).clone(),
        hidden_b: binding.leaf(drsf_core::optim::ParamId(1)).clone(),
        out_w: binding.leaf(drsf_core::optim::ParamId(2)).clone(),
        out_b: binding.leaf(drsf_core::optim::ParamId(3)).clone(),
    };
    let logits = domain_classifier_forward(&mut tape, &feats, &params).unwrap();
    let sq = tape.mul(&logits, &logits).unwrap();
    let loss = tape.sum_all(&sq).unwrap();
    let grads: BTreeMap<String, Tensor> = {
        let g = tape.backward(&loss).unwrap();
        set.gradient_map(&binding, &g)
    };
    assert_eq!(grads.len(), 4);
    assert!(grads.values().all(|g| !g.is_empty()));
}
