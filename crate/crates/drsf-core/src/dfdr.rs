//! Discriminative feature decoupling and reassembly.
//!
//! Feature maps are split per instance into a normalized, affine-mapped
//! primary part (content) and the residual shared part (style). Channel
//! recalibration attention gates the shared part back in, producing a
//! gain branch that continues through the network and an interference
//! branch used only for entropy-difference supervision. Primary features
//! are aligned across domains with an RBF-kernel MMD loss.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::{GradientTape, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Learnable instance-norm affine parameters of one DFDR layer.
/// `gamma`/`beta` are per-channel tensors of length C; `epsilon` is the
/// variance floor inside sigma.
#[derive(Debug, Clone)]
pub struct AffineParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub epsilon: f64,
}

impl AffineParams {
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(AffineParams {
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels]),
            epsilon: DEFAULT_EPSILON,
        })
    }
}

/// Per-layer split of features into primary (domain-invariant) and shared
/// (domain-specific) parts, with the instance statistics that produced it.
#[derive(Debug, Clone)]
pub struct DecoupledFeatures {
    /// Normalized, affine-mapped content part, N×C×H×W.
    pub f_pri: Tensor,
    /// Residual style part f − f_pri, N×C×H×W.
    pub f_sha: Tensor,
    /// Spatial mean per instance and channel, N×C.
    pub mu: Tensor,
    /// sqrt(spatial population variance + epsilon), N×C.
    pub sigma: Tensor,
}

/// Channel recalibration attention parameters. The linear map `w` is per
/// channel (C×2: one weight each for the mean and std of the shared
/// features); batch normalization over the batch axis follows.
#[derive(Debug, Clone)]
pub struct CraParams {
    pub w: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

/// Non-trainable CRA state: running batch-norm statistics used in eval.
#[derive(Debug, Clone)]
pub struct CraRunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl CraRunningStats {
    pub fn new(channels: usize) -> Self {
        CraRunningStats {
            mean: alloc::vec![0.0; channels],
            var: alloc::vec![1.0; channels],
        }
    }

    /// Blend in fresh batch statistics: r ← (1−m)·r + m·batch.
    pub fn update(&mut self, stats: &CraBatchStats, momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Batch statistics computed by a train-mode CRA pass, to be folded into
/// the running stats by the caller.
#[derive(Debug, Clone)]
pub struct CraBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Execution mode of a DFDR forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CraMode {
    /// Batch statistics; caller receives them for the running-stat update.
    Train,
    /// Batch statistics but no running-stat update (auxiliary entropy
    /// branches re-entering the backbone).
    TrainFrozen,
    /// Running statistics.
    Eval,
}

/// The two complementary reassembled branches.
#[derive(Debug, Clone)]
pub struct ReassembledFeatures {
    /// f_pri + V ⊙ f_sha; continues through the network.
    pub gain: Tensor,
    /// f_pri + (1−V) ⊙ f_sha; used only by the entropy-difference loss.
    pub interference: Tensor,
    /// Channel attention V, N×C, strictly inside (0,1).
    pub attention: Tensor,
}

/// Bandwidth selection for the RBF kernel.
#[derive(Debug, Clone)]
pub enum BandwidthMode {
    /// gamma = 1 / median of pairwise squared distances over the union of
    /// both pooled sets (self-pairs excluded), recomputed per pair and
    /// detached from gradients. Falls back to gamma = 1 on a zero median.
    MedianHeuristic,
    /// Kernel exp(−‖d‖² / (2·bandwidth²)).
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct MmdConfig {
    pub bandwidth: BandwidthMode,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidth: BandwidthMode::MedianHeuristic,
        }
    }
}

/// Entropy evaluation layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    /// probs N×K: mean sample entropy.
    Classification,
    /// probs N×K×H×W: mean per-pixel entropy over all positions.
    Segmentation,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Spatial mean and sqrt(population variance + epsilon) per (n, c).
pub fn instance_stats(
    tape: &mut GradientTape,
    f: &Tensor,
    epsilon: f64,
) -> Result<(Tensor, Tensor)> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "instance_stats expects N×C×H×W, got {s:?}"
        )));
    }
    let mu = tape.mean(f, &[2, 3], false)?;
    let var = tape.var(f, &[2, 3], false)?;
    let var_eps = tape.add_scalar(&var, epsilon)?;
    let sigma = tape.sqrt(&var_eps)?;
    Ok((mu, sigma))
}

/// Instance-norm decoupling: f_pri = gamma ⊙ (f − mu)/sigma + beta,
/// f_sha = f − f_pri.
pub fn decouple(
    tape: &mut GradientTape,
    f: &Tensor,
    affine: &AffineParams,
) -> Result<DecoupledFeatures> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(CoreError::ShapeMismatch(format!(
            "decouple expects N×C×H×W, got {s:?}"
        )));
    }
    let (n, c) = (s[0], s[1]);
    if affine.gamma.shape() != [c] || affine.beta.shape() != [c] {
        return Err(CoreError::ShapeMismatch(format!(
            "affine parameters for {c} channels, got gamma {:?} beta {:?}",
            affine.gamma.shape(),
            affine.beta.shape()
        )));
    }
    let (mu, sigma) = instance_stats(tape, f, affine.epsilon)?;
    let mu_b = tape.reshape(&mu, &[n, c, 1, 1])?;
    let sigma_b = tape.reshape(&sigma, &[n, c, 1, 1])?;
    let centered = tape.sub(f, &mu_b)?;
    let normalized = tape.div(&centered, &sigma_b)?;
    let gamma_b = tape.reshape(&affine.gamma, &[c, 1, 1])?;
    let beta_b = tape.reshape(&affine.beta, &[c, 1, 1])?;
    let scaled = tape.mul(&normalized, &gamma_b)?;
    let f_pri = tape.add(&scaled, &beta_b)?;
    let f_sha = tape.sub(f, &f_pri)?;
    Ok(DecoupledFeatures {
        f_pri,
        f_sha,
        mu,
        sigma,
    })
}

/// Style descriptor Q[n,c] = [mu(f_sha) ∥ sigma(f_sha)], N×C×2. Statistics
/// are recomputed on the shared part with the same epsilon floor.
pub fn style_descriptor(
    tape: &mut GradientTape,
    decoupled: &DecoupledFeatures,
    epsilon: f64,
) -> Result<Tensor> {
    let (mu, sigma) = instance_stats(tape, &decoupled.f_sha, epsilon)?;
    tape.stack_last2(&mu, &sigma)
}

/// Channel recalibration attention: per-channel linear map of the style
/// descriptor, batch normalization over the batch axis, then sigmoid.
///
/// Returns the attention V (N×C) plus, in [`CraMode::Train`], the batch
/// statistics for the caller to fold into the running stats.
pub fn cra_forward(
    tape: &mut GradientTape,
    q: &Tensor,
    params: &CraParams,
    running: &CraRunningStats,
    mode: CraMode,
) -> Result<(Tensor, Option<CraBatchStats>)> {
    let s = q.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(CoreError::ShapeMismatch(format!(
            "cra_forward expects N×C×2, got {s:?}"
        )));
    }
    let n = s[0];
    let t = tape.channel_linear2(q, &params.w)?;
    let (t_hat, stats) = match mode {
        CraMode::Train | CraMode::TrainFrozen => {
            if n < 2 {
                return Err(CoreError::InvalidArgument(format!(
                    "train-mode CRA needs a batch of at least 2, got {n}"
                )));
            }
            let mean = tape.mean(&t, &[0], false)?;
            let var = tape.var(&t, &[0], false)?;
            let var_eps = tape.add_scalar(&var, params.bn_epsilon)?;
            let std = tape.sqrt(&var_eps)?;
            let centered = tape.sub(&t, &mean)?;
            let normalized = tape.div(&centered, &std)?;
            let scaled = tape.mul(&normalized, &params.bn_gamma)?;
            let out = tape.add(&scaled, &params.bn_beta)?;
            let stats = if mode == CraMode::Train {
                Some(CraBatchStats {
                    mean: mean.values().to_vec(),
                    var: var.values().to_vec(),
                })
            } else {
                None
            };
            (out, stats)
        }
        CraMode::Eval => {
            let c = s[1];
            let mean = Tensor::new(&[c], running.mean.clone())?;
            let std_vals: Vec<f64> = running
                .var
                .iter()
                .map(|&v| math::sqrt(v + params.bn_epsilon))
                .collect();
            let std = Tensor::new(&[c], std_vals)?;
            let centered = tape.sub(&t, &mean)?;
            let normalized = tape.div(&centered, &std)?;
            let scaled = tape.mul(&normalized, &params.bn_gamma)?;
            (tape.add(&scaled, &params.bn_beta)?, None)
        }
    };
    let v = tape.sigmoid(&t_hat)?;
    Ok((v, stats))
}

/// Reassemble the decoupled features under attention `v` (N×C):
/// gain = f_pri + V ⊙ f_sha, interference = f_pri + (1−V) ⊙ f_sha.
pub fn reassemble(
    tape: &mut GradientTape,
    decoupled: &DecoupledFeatures,
    attention: &Tensor,
) -> Result<ReassembledFeatures> {
    let fs = decoupled.f_pri.shape();
    let (n, c) = (fs[0], fs[1]);
    if attention.shape() != [n, c] {
        return Err(CoreError::ShapeMismatch(format!(
            "attention {:?} for features {:?}",
            attention.shape(),
            fs
        )));
    }
    if attention.values().iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return Err(CoreError::InvalidArgument(String::from(
            "attention must lie strictly inside (0,1)",
        )));
    }
    let v_b = tape.reshape(attention, &[n, c, 1, 1])?;
    let gated = tape.mul(&decoupled.f_sha, &v_b)?;
    let gain = tape.add(&decoupled.f_pri, &gated)?;
    let neg_v = tape.mul_scalar(&v_b, -1.0)?;
    let one_minus = tape.add_scalar(&neg_v, 1.0)?;
    let gated_inv = tape.mul(&decoupled.f_sha, &one_minus)?;
    let interference = tape.add(&decoupled.f_pri, &gated_inv)?;
    Ok(ReassembledFeatures {
        gain,
        interference,
        attention: attention.clone(),
    })
}

/// Gain branch only (eval and auxiliary passes): f_pri + V ⊙ f_sha. The
/// interference branch is never materialized on this path.
pub fn reassemble_gain_only(
    tape: &mut GradientTape,
    decoupled: &DecoupledFeatures,
    attention: &Tensor,
) -> Result<Tensor> {
    let fs = decoupled.f_pri.shape();
    let (n, c) = (fs[0], fs[1]);
    let v_b = tape.reshape(attention, &[n, c, 1, 1])?;
    let gated = tape.mul(&decoupled.f_sha, &v_b)?;
    tape.add(&decoupled.f_pri, &gated)
}

/// Median of pairwise squared distances over the union of two pooled row
/// sets (self-pairs excluded). Even counts take the midpoint.
fn median_sq_dist(x: &Tensor, y: &Tensor) -> f64 {
    let c = x.shape()[1];
    let rows: Vec<&[f64]> = x
        .values()
        .chunks_exact(c)
        .chain(y.values().chunks_exact(c))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d);
        }
    }
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_unstable_by(f64::total_cmp);
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    }
}

/// Global-average-pool an N×C×H×W tensor to N×C. N×C input passes through.
pub fn global_pool(tape: &mut GradientTape, f: &Tensor) -> Result<Tensor> {
    match f.shape().len() {
        2 => Ok(f.clone()),
        4 => tape.mean(f, &[2, 3], false),
        other => Err(CoreError::ShapeMismatch(format!(
            "global_pool expects rank 2 or 4, got rank {other}"
        ))),
    }
}

/// Alignment loss: mean over pseudo-domains of the biased RBF-MMD² between
/// globally pooled primary features.
pub fn mmd_loss(
    tape: &mut GradientTape,
    source_pri: &Tensor,
    pseudo_pri: &[Tensor],
    cfg: &MmdConfig,
) -> Result<Tensor> {
    if pseudo_pri.is_empty() {
        return Err(CoreError::InvalidArgument(String::from(
            "mmd_loss needs at least one pseudo-domain batch",
        )));
    }
    let src = global_pool(tape, source_pri)?;
    if src.shape()[0] < 2 {
        return Err(CoreError::InvalidArgument(String::from(
            "mmd_loss needs at least 2 source samples",
        )));
    }
    let mut total: Option<Tensor> = None;
    for p in pseudo_pri {
        let pp = global_pool(tape, p)?;
        if pp.shape()[0] < 2 {
            return Err(CoreError::InvalidArgument(String::from(
                "mmd_loss needs at least 2 samples per pseudo-domain batch",
            )));
        }
        let gamma = match cfg.bandwidth {
            BandwidthMode::Fixed(bw) => {
                if bw <= 0.0 {
                    return Err(CoreError::InvalidArgument(format!("bandwidth {bw}")));
                }
                1.0 / (2.0 * bw * bw)
            }
            BandwidthMode::MedianHeuristic => {
                // floored so the kernel cannot sharpen without bound as the
                // distributions come together
                let med = median_sq_dist(&src, &pp).max(1e-2);
                1.0 / med
            }
        };
        let term = tape.rbf_mmd2(&src, &pp, gamma)?;
        total = Some(match &total {
            None => term,
            Some(acc) => tape.add(acc, &term)?,
        });
    }
    let total = total.expect("non-empty");
    tape.mul_scalar(&total, 1.0 / pseudo_pri.len() as f64)
}

/// Mean predictive entropy of a probability tensor. Classification mode
/// expects N×K, segmentation mode N×K×H×W (per-pixel entropies averaged
/// over all positions and samples).
pub fn prediction_entropy(
    tape: &mut GradientTape,
    probs: &Tensor,
    task_mode: TaskMode,
) -> Result<Tensor> {
    let rank = probs.shape().len();
    match task_mode {
        TaskMode::Classification if rank != 2 => {
            return Err(CoreError::ShapeMismatch(format!(
                "classification entropy expects N×K, got {:?}",
                probs.shape()
            )))
        }
        TaskMode::Segmentation if rank != 4 => {
            return Err(CoreError::ShapeMismatch(format!(
                "segmentation entropy expects N×K×H×W, got {:?}",
                probs.shape()
            )))
        }
        _ => {}
    }
    tape.prediction_entropy(probs)
}

/// Entropy-difference supervision:
/// softplus(H_gain − H_pri) + softplus(H_pri − H_interf).
pub fn reassembly_loss(
    tape: &mut GradientTape,
    h_gain: &Tensor,
    h_pri: &Tensor,
    h_interf: &Tensor,
) -> Result<Tensor> {
    let d1 = tape.sub(h_gain, h_pri)?;
    let s1 = tape.softplus(&d1)?;
    let d2 = tape.sub(h_pri, h_interf)?;
    let s2 = tape.softplus(&d2)?;
    tape.add(&s1, &s2)
}

/// Side products of a train-mode DFDR layer pass.
#[derive(Debug, Clone)]
pub struct DfdrSideOutputs {
    pub decoupled: DecoupledFeatures,
    pub reassembled: ReassembledFeatures,
    /// Batch statistics for the running-stat update (main train pass only).
    pub batch_stats: Option<CraBatchStats>,
}

/// Full DFDR layer pass.
///
/// Train mode returns the gain branch plus all side products; frozen/eval
/// modes return the gain branch only and never build the interference
/// branch.
pub fn dfdr_layer_forward(
    tape: &mut GradientTape,
    f: &Tensor,
    affine: &AffineParams,
    cra: &CraParams,
    running: &CraRunningStats,
    mode: CraMode,
) -> Result<(Tensor, Option<DfdrSideOutputs>)> {
    let decoupled = decouple(tape, f, affine)?;
    let q = style_descriptor(tape, &decoupled, affine.epsilon)?;
    let (attention, batch_stats) = cra_forward(tape, &q, cra, running, mode)?;
    match mode {
        CraMode::Train => {
            let reassembled = reassemble(tape, &decoupled, &attention)?;
            let gain = reassembled.gain.clone();
            Ok((
                gain,
                Some(DfdrSideOutputs {
                    decoupled,
                    reassembled,
                    batch_stats,
                }),
            ))
        }
        CraMode::TrainFrozen | CraMode::Eval => {
            let gain = reassemble_gain_only(tape, &decoupled, &attention)?;
            Ok((gain, None))
        }
    }
}
