//! Multi-pseudo-domain soft fusion.
//!
//! Source primary features are blended with pseudo-domain gain features
//! under a Beta-sampled coefficient, with matching domain-label
//! interpolation. A gradient-reversal layer feeds the blended and raw
//! features into a small domain classifier; the classifier learns to
//! separate domains while the reversed gradient pushes the feature
//! extractor toward domain-invariant representations.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::RngStream;
use crate::tensor::{GradientTape, Tensor};

/// Soft domain assignment over source (index 0) and K pseudo-domains
/// (indices 1..K).
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLabel {
    distribution: Vec<f64>,
}

impl DomainLabel {
    pub fn new(distribution: Vec<f64>) -> Result<Self> {
        if distribution.is_empty() {
            return Err(CoreError::InvalidArgument(String::from(
                "empty domain label",
            )));
        }
        let mut sum = 0.0;
        for &p in &distribution {
            if !(0.0..=1.0 + 1e-9).contains(&p) {
                return Err(CoreError::InvalidArgument(format!(
                    "domain label entry {p} outside [0,1]"
                )));
            }
            sum += p;
        }
        if crate::math::abs(sum - 1.0) > 1e-9 {
            return Err(CoreError::InvalidArgument(format!(
                "domain label sums to {sum}"
            )));
        }
        Ok(DomainLabel { distribution })
    }

    /// One-hot label for domain `index` out of `count` domains.
    pub fn one_hot(index: usize, count: usize) -> Result<Self> {
        if index >= count {
            return Err(CoreError::InvalidArgument(format!(
                "domain index {index} out of {count}"
            )));
        }
        let mut d = alloc::vec![0.0; count];
        d[index] = 1.0;
        Ok(DomainLabel { distribution: d })
    }

    pub fn distribution(&self) -> &[f64] {
        &self.distribution
    }

    pub fn len(&self) -> usize {
        self.distribution.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distribution.is_empty()
    }
}

/// Which source-pseudo pair (or the average) a fused batch represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionIndex {
    Pseudo(usize),
    Averaged,
}

/// Convex feature/label interpolation product.
#[derive(Debug, Clone)]
pub struct FusedBatch {
    pub features: Tensor,
    /// One label per sample; a batch-level lambda makes them identical, but
    /// the per-sample layout is kept for the classifier targets.
    pub labels: Vec<DomainLabel>,
    pub lambda_used: f64,
    pub domain_index: FusionIndex,
}

/// Gradient reversal configuration.
#[derive(Debug, Clone, Copy)]
pub struct GrlConfig {
    pub factor: f64,
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig { factor: 1.0 }
    }
}

impl GrlConfig {
    pub fn new(factor: f64) -> Result<Self> {
        if factor < 0.0 || !factor.is_finite() {
            return Err(CoreError::InvalidArgument(format!("GRL factor {factor}")));
        }
        Ok(GrlConfig { factor })
    }
}

/// Two-layer perceptron over globally pooled features.
#[derive(Debug, Clone)]
pub struct DomainClassifierParams {
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const DEFAULT_HIDDEN_WIDTH: usize = 64;

impl DomainClassifierParams {
    /// Zero-initialized classifier (uniform logits) for tests.
    pub fn zeros(channels: usize, hidden: usize, domains: usize) -> Self {
        DomainClassifierParams {
            hidden_w: Tensor::zeros(&[channels, hidden]),
            hidden_b: Tensor::zeros(&[hidden]),
            out_w: Tensor::zeros(&[hidden, domains]),
            out_b: Tensor::zeros(&[domains]),
        }
    }

    pub fn domains(&self) -> usize {
        self.out_w.shape()[1]
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// One Beta(alpha, alpha) draw via two gamma draws, clamped to
/// [1e-6, 1−1e-6].
pub fn sample_lambda(alpha: f64, rng: &mut RngStream) -> Result<f64> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(CoreError::InvalidArgument(format!("beta alpha {alpha}")));
    }
    let x = rng.gamma(alpha);
    let y = rng.gamma(alpha);
    let lambda = x / (x + y);
    Ok(lambda.clamp(1e-6, 1.0 - 1e-6))
}

/// Convex feature blend λ·source + (1−λ)·pseudo, differentiable in both.
pub fn fuse_features(
    tape: &mut GradientTape,
    source_pri: &Tensor,
    pseudo_gain: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    if source_pri.shape() != pseudo_gain.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "fuse_features {:?} vs {:?}",
            source_pri.shape(),
            pseudo_gain.shape()
        )));
    }
    if !(0.0 < lambda && lambda < 1.0) {
        return Err(CoreError::InvalidArgument(format!("lambda {lambda}")));
    }
    let a = tape.mul_scalar(source_pri, lambda)?;
    let b = tape.mul_scalar(pseudo_gain, 1.0 - lambda)?;
    tape.add(&a, &b)
}

/// Matching label interpolation λ·source + (1−λ)·pseudo.
pub fn fuse_labels(source: &DomainLabel, pseudo: &DomainLabel, lambda: f64) -> Result<DomainLabel> {
    if source.len() != pseudo.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "label lengths {} vs {}",
            source.len(),
            pseudo.len()
        )));
    }
    if !(0.0 < lambda && lambda < 1.0) {
        return Err(CoreError::InvalidArgument(format!("lambda {lambda}")));
    }
    let mixed: Vec<f64> = source
        .distribution()
        .iter()
        .zip(pseudo.distribution())
        .map(|(&s, &p)| lambda * s + (1.0 - lambda) * p)
        .collect();
    DomainLabel::new(mixed)
}

/// Arithmetic mean of fused features and label distributions over the K
/// source-pseudo pairs.
pub fn average_fusions(tape: &mut GradientTape, fusions: &[FusedBatch]) -> Result<FusedBatch> {
    if fusions.is_empty() {
        return Err(CoreError::InvalidArgument(String::from(
            "average_fusions on empty list",
        )));
    }
    let k = fusions.len() as f64;
    let mut acc = fusions[0].features.clone();
    for f in &fusions[1..] {
        if f.features.shape() != acc.shape() {
            return Err(CoreError::ShapeMismatch(String::from(
                "fused batches have incongruent shapes",
            )));
        }
        acc = tape.add(&acc, &f.features)?;
    }
    let features = tape.mul_scalar(&acc, 1.0 / k)?;

    let n = fusions[0].labels.len();
    let width = fusions[0].labels[0].len();
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let mut d = alloc::vec![0.0f64; width];
        for f in fusions {
            for (acc, &p) in d.iter_mut().zip(f.labels[s].distribution()) {
                *acc += p;
            }
        }
        for p in d.iter_mut() {
            *p /= k;
        }
        labels.push(DomainLabel::new(d)?);
    }
    Ok(FusedBatch {
        features,
        labels,
        lambda_used: fusions.iter().map(|f| f.lambda_used).sum::<f64>() / k,
        domain_index: FusionIndex::Averaged,
    })
}

/// Gradient reversal: identity forward, −factor × gradient backward.
pub fn grl(tape: &mut GradientTape, x: &Tensor, cfg: &GrlConfig) -> Result<Tensor> {
    tape.grl(x, cfg.factor)
}

/// Domain classifier: global average pool → hidden rectified layer →
/// output logits (N × domains).
pub fn domain_classifier_forward(
    tape: &mut GradientTape,
    features: &Tensor,
    params: &DomainClassifierParams,
) -> Result<Tensor> {
    let pooled = crate::dfdr::global_pool(tape, features)?;
    if pooled.shape()[1] != params.hidden_w.shape()[0] {
        return Err(CoreError::ShapeMismatch(format!(
            "classifier expects {} channels, got {}",
            params.hidden_w.shape()[0],
            pooled.shape()[1]
        )));
    }
    let h = tape.linear(&pooled, &params.hidden_w, &params.hidden_b)?;
    let h = tape.relu(&h)?;
    tape.linear(&h, &params.out_w, &params.out_b)
}

fn labels_tensor(labels: &[DomainLabel], domains: usize) -> Result<Tensor> {
    let n = labels.len();
    let mut vals = Vec::with_capacity(n * domains);
    for l in labels {
        if l.len() != domains {
            return Err(CoreError::ShapeMismatch(format!(
                "label width {} for {domains} domains",
                l.len()
            )));
        }
        vals.extend_from_slice(l.distribution());
    }
    Tensor::new(&[n, domains], vals)
}

fn repeat_label(label: &DomainLabel, n: usize) -> Vec<DomainLabel> {
    (0..n).map(|_| label.clone()).collect()
}

/// Adversarial loss of the soft-fusion module:
/// CE(D(F̃ˢ), Lˢ) + (1/K)·Σ CE(D(F̃ᵖᵗᵢ), Lᵖᵗᵢ) + CE(D(F̃ˢᶠ), L̃ˢᶠ).
///
/// Every feature tensor passes through the gradient-reversal layer before
/// the classifier. Soft-label cross-entropy is used throughout.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_loss(
    tape: &mut GradientTape,
    source_gain: &Tensor,
    pseudo_gains: &[Tensor],
    fused_avg: &FusedBatch,
    source_label: &DomainLabel,
    pseudo_labels: &[DomainLabel],
    params: &DomainClassifierParams,
    grl_cfg: &GrlConfig,
) -> Result<Tensor> {
    if pseudo_gains.is_empty() {
        return Err(CoreError::InvalidArgument(String::from(
            "adversarial_loss needs at least one pseudo-domain",
        )));
    }
    if pseudo_labels.len() != pseudo_gains.len() {
        return Err(CoreError::InvalidArgument(format!(
            "{} labels for {} pseudo-domains",
            pseudo_labels.len(),
            pseudo_gains.len()
        )));
    }
    let domains = params.domains();
    let k = pseudo_gains.len() as f64;

    let n_src = source_gain.shape()[0];
    let r = grl(tape, source_gain, grl_cfg)?;
    let logits = domain_classifier_forward(tape, &r, params)?;
    let targets = labels_tensor(&repeat_label(source_label, n_src), domains)?;
    let mut total = tape.cross_entropy_soft(&logits, &targets)?;

    let mut pseudo_sum: Option<Tensor> = None;
    for (pg, pl) in pseudo_gains.iter().zip(pseudo_labels) {
        let r = grl(tape, pg, grl_cfg)?;
        let logits = domain_classifier_forward(tape, &r, params)?;
        let targets = labels_tensor(&repeat_label(pl, pg.shape()[0]), domains)?;
        let ce = tape.cross_entropy_soft(&logits, &targets)?;
        pseudo_sum = Some(match &pseudo_sum {
            None => ce,
            Some(acc) => tape.add(acc, &ce)?,
        });
    }
    let pseudo_mean = tape.mul_scalar(&pseudo_sum.expect("non-empty"), 1.0 / k)?;
    total = tape.add(&total, &pseudo_mean)?;

    let r = grl(tape, &fused_avg.features, grl_cfg)?;
    let logits = domain_classifier_forward(tape, &r, params)?;
    let targets = labels_tensor(&fused_avg.labels, domains)?;
    let fused_ce = tape.cross_entropy_soft(&logits, &targets)?;
    tape.add(&total, &fused_ce)
}
