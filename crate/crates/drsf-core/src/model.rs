//! Convolutional backbone with configurable DFDR insertion points, task
//! heads, and parameter accounting.
//!
//! Stages are conv(3x3) → relu blocks with 2x average-pool downsampling
//! between stages. A DFDR layer can sit after each stage's activation.
//! The segmentation head upsamples the final features back to input
//! resolution and applies a per-pixel linear classifier; the
//! classification head pools globally and applies a linear map.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dfdr::{
    self, AffineParams, CraMode, CraParams, CraRunningStats, DfdrSideOutputs, TaskMode,
    DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM, DEFAULT_EPSILON,
};
use crate::error::{CoreError, Result};
use crate::math;
use crate::mdsf::DomainClassifierParams;
use crate::optim::{ParamBinding, ParamId, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{GradientTape, Tensor};

/// Backbone layout.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// DFDR insertion mask, one flag per stage.
    pub dfdr_mask: Vec<bool>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![8, 16, 32],
            blocks_per_stage: 1,
            dfdr_mask: vec![true, true, true],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.blocks_per_stage == 0 {
            return Err(CoreError::InvalidArgument(String::from(
                "backbone needs at least one stage and one block",
            )));
        }
        if self.dfdr_mask.len() != self.stage_channels.len() {
            return Err(CoreError::InvalidArgument(format!(
                "dfdr_mask has {} entries for {} stages",
                self.dfdr_mask.len(),
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Total downsampling factor in front of the final features.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.stages() - 1)
    }
}

/// Full model layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub task_mode: TaskMode,
    pub class_count: usize,
    pub input_channels: usize,
    /// Domain count (K+1) for the adversarial classifier; 0 disables it.
    pub domains: usize,
    pub classifier_hidden: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, task_mode: TaskMode, class_count: usize, domains: usize) -> Self {
        ModelConfig {
            backbone,
            task_mode,
            class_count,
            input_channels: crate::synth::CHANNELS,
            domains,
            classifier_hidden: crate::mdsf::DEFAULT_HIDDEN_WIDTH,
        }
    }
}

#[derive(Debug, Clone)]
struct DfdrIds {
    gamma: ParamId,
    beta: ParamId,
    cra_w: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
}

#[derive(Debug, Clone)]
struct ClassifierIds {
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
struct ModelIds {
    convs: Vec<Vec<(ParamId, ParamId)>>,
    dfdr: Vec<Option<DfdrIds>>,
    head_w: ParamId,
    head_b: ParamId,
    classifier: Option<ClassifierIds>,
}

/// Trainable model: parameter registry plus CRA running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    ids: ModelIds,
    pub cra_running: Vec<Option<CraRunningStats>>,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut RngStream) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * rng.normal()).collect())
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut RngStream) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_in(-bound, bound)).collect())
}

impl Model {
    /// Build a model with freshly initialized parameters drawn from `rng`.
    pub fn new(cfg: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.backbone.validate()?;
        let mut params = ParamSet::new();
        let mut convs = Vec::new();
        let mut dfdr_ids = Vec::new();
        let mut cra_running = Vec::new();
        let mut cin = cfg.input_channels;
        for (s, &cout) in cfg.backbone.stage_channels.iter().enumerate() {
            let stage = s + 1;
            let mut blocks = Vec::new();
            let mut block_cin = cin;
            for b in 0..cfg.backbone.blocks_per_stage {
                let std = math::sqrt(2.0 / (9.0 * block_cin as f64));
                let k = params.add(
                    &format!("backbone.stage{stage}.block{b}.kernel"),
                    normal_tensor(&[cout, block_cin, 3, 3], std, rng)?,
                )?;
                let bias = params.add(
                    &format!("backbone.stage{stage}.block{b}.bias"),
                    Tensor::zeros(&[cout]),
                )?;
                blocks.push((k, bias));
                block_cin = cout;
            }
            convs.push(blocks);
            if cfg.backbone.dfdr_mask[s] {
                // affine starts as identity; the CRA linear map starts small
                // and symmetric so attention opens at 0.5
                let gamma = params.add(
                    &format!("dfdr.stage{stage}.affine.gamma"),
                    Tensor::full(&[cout], 1.0)?,
                )?;
                let beta = params.add(
                    &format!("dfdr.stage{stage}.affine.beta"),
                    Tensor::zeros(&[cout]),
                )?;
                let bound = 1.0 / math::sqrt(2.0);
                let cra_w = params.add(
                    &format!("dfdr.stage{stage}.cra.w"),
                    uniform_tensor(&[cout, 2], bound, rng)?,
                )?;
                let bn_gamma = params.add(
                    &format!("dfdr.stage{stage}.cra.bn_gamma"),
                    Tensor::full(&[cout], 1.0)?,
                )?;
                let bn_beta = params.add(
                    &format!("dfdr.stage{stage}.cra.bn_beta"),
                    Tensor::zeros(&[cout]),
                )?;
                dfdr_ids.push(Some(DfdrIds {
                    gamma,
                    beta,
                    cra_w,
                    bn_gamma,
                    bn_beta,
                }));
                cra_running.push(Some(CraRunningStats::new(cout)));
            } else {
                dfdr_ids.push(None);
                cra_running.push(None);
            }
            cin = cout;
        }
        let c_last = *cfg.backbone.stage_channels.last().expect("validated");
        let (head_w, head_b) = match cfg.task_mode {
            TaskMode::Segmentation => {
                let std = 1.0 / math::sqrt(c_last as f64);
                (
                    params.add(
                        "head.weight",
                        normal_tensor(&[cfg.class_count, c_last], std, rng)?,
                    )?,
                    params.add("head.bias", Tensor::zeros(&[cfg.class_count]))?,
                )
            }
            TaskMode::Classification => {
                let std = 1.0 / math::sqrt(c_last as f64);
                (
                    params.add(
                        "head.weight",
                        normal_tensor(&[c_last, cfg.class_count], std, rng)?,
                    )?,
                    params.add("head.bias", Tensor::zeros(&[cfg.class_count]))?,
                )
            }
        };
        let classifier = if cfg.domains > 0 {
            let std_h = 1.0 / math::sqrt(c_last as f64);
            let std_o = 1.0 / math::sqrt(cfg.classifier_hidden as f64);
            Some(ClassifierIds {
                hidden_w: params.add(
                    "mdsf.classifier.hidden.weight",
                    normal_tensor(&[c_last, cfg.classifier_hidden], std_h, rng)?,
                )?,
                hidden_b: params.add(
                    "mdsf.classifier.hidden.bias",
                    Tensor::zeros(&[cfg.classifier_hidden]),
                )?,
                out_w: params.add(
                    "mdsf.classifier.output.weight",
                    normal_tensor(&[cfg.classifier_hidden, cfg.domains], std_o, rng)?,
                )?,
                out_b: params.add(
                    "mdsf.classifier.output.bias",
                    Tensor::zeros(&[cfg.domains]),
                )?,
            })
        } else {
            None
        };
        Ok(Model {
            cfg,
            params,
            ids: ModelIds {
                convs,
                dfdr: dfdr_ids,
                head_w,
                head_b,
                classifier,
            },
            cra_running,
        })
    }

    /// Bind every parameter as a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut GradientTape) -> BoundModel<'a> {
        let binding = self.params.bind(tape);
        BoundModel {
            model: self,
            binding,
        }
    }

    /// Fold CRA batch statistics from a train pass into the running stats.
    pub fn apply_cra_updates(&mut self, sides: &[Option<DfdrSideOutputs>]) {
        for (s, side) in sides.iter().enumerate() {
            if let (Some(side), Some(running)) = (side, self.cra_running[s].as_mut()) {
                if let Some(stats) = &side.batch_stats {
                    running.update(stats, DEFAULT_BN_MOMENTUM);
                }
            }
        }
    }

    /// Trainable parameter counts; the adversarial classifier is excluded
    /// (it is training-time auxiliary state, absent from the deployed
    /// model).
    pub fn count_params(&self) -> ParamCounts {
        let mut total = 0usize;
        let mut dfdr_only = 0usize;
        for p in self.params.iter() {
            if p.name.starts_with("mdsf.") {
                continue;
            }
            total += p.value.len();
            if p.name.starts_with("dfdr.") {
                dfdr_only += p.value.len();
            }
        }
        let base = total - dfdr_only;
        ParamCounts {
            total,
            dfdr_only,
            delta_fraction: if base == 0 {
                0.0
            } else {
                dfdr_only as f64 / base as f64
            },
        }
    }

    /// All named state: trainable parameters plus CRA running-stat
    /// buffers, sorted by name.
    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    p.value.shape().to_vec(),
                    p.value.values().to_vec(),
                )
            })
            .collect();
        for (s, running) in self.cra_running.iter().enumerate() {
            if let Some(r) = running {
                let stage = s + 1;
                out.push((
                    format!("dfdr.stage{stage}.cra.bn_running_mean"),
                    vec![r.mean.len()],
                    r.mean.clone(),
                ));
                out.push((
                    format!("dfdr.stage{stage}.cra.bn_running_var"),
                    vec![r.var.len()],
                    r.var.clone(),
                ));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Load state produced by [`Model::state_entries`]. Every model entry
    /// must be present with an identical shape; unknown names are errors.
    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let expected = self.state_entries();
        if entries.len() != expected.len() {
            return Err(CoreError::CorruptData(format!(
                "checkpoint has {} entries, model needs {}",
                entries.len(),
                expected.len()
            )));
        }
        for (name, shape, values) in entries {
            if let Some(stage_buf) = name
                .strip_prefix("dfdr.stage")
                .and_then(|rest| rest.split_once('.'))
            {
                let (stage_str, tail) = stage_buf;
                if tail == "cra.bn_running_mean" || tail == "cra.bn_running_var" {
                    let stage: usize = stage_str.parse().map_err(|_| {
                        CoreError::CorruptData(format!("bad state name {name:?}"))
                    })?;
                    let running = self
                        .cra_running
                        .get_mut(stage - 1)
                        .and_then(|r| r.as_mut())
                        .ok_or_else(|| {
                            CoreError::CorruptData(format!(
                                "running stats {name:?} for a stage without DFDR"
                            ))
                        })?;
                    let dst = if tail.ends_with("mean") {
                        &mut running.mean
                    } else {
                        &mut running.var
                    };
                    if shape != &[dst.len()] {
                        return Err(CoreError::ShapeMismatch(format!(
                            "{name:?}: {shape:?} vs [{}]",
                            dst.len()
                        )));
                    }
                    dst.copy_from_slice(values);
                    continue;
                }
            }
            self.params
                .set_value(name, Tensor::new(shape, values.clone())?)
                .map_err(|e| match e {
                    CoreError::InvalidArgument(m) => CoreError::CorruptData(m),
                    other => other,
                })?;
        }
        Ok(())
    }
}

/// Exact parameter counts and the DFDR overhead fraction
/// dfdr_only / (total − dfdr_only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub total: usize,
    pub dfdr_only: usize,
    pub delta_fraction: f64,
}

/// Forward execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Side outputs per masked stage; CRA batch stats returned for the
    /// running-stat update.
    Train,
    /// Auxiliary train pass: batch-stat CRA, no side outputs, no updates.
    AuxTrain,
    /// Running-stat CRA, gain branch only.
    Eval,
}

impl ForwardMode {
    fn cra_mode(self) -> CraMode {
        match self {
            ForwardMode::Train => CraMode::Train,
            ForwardMode::AuxTrain => CraMode::TrainFrozen,
            ForwardMode::Eval => CraMode::Eval,
        }
    }
}

/// Per-step view of the model with parameters bound to the active tape.
pub struct BoundModel<'a> {
    model: &'a Model,
    binding: ParamBinding,
}

impl<'a> BoundModel<'a> {
    fn leaf(&self, id: ParamId) -> &Tensor {
        self.binding.leaf(id)
    }

    pub fn binding(&self) -> &ParamBinding {
        &self.binding
    }

    pub fn model(&self) -> &'a Model {
        self.model
    }

    fn dfdr_tensors(&self, stage: usize) -> Option<(AffineParams, CraParams)> {
        self.model.ids.dfdr[stage].as_ref().map(|ids| {
            (
                AffineParams {
                    gamma: self.leaf(ids.gamma).clone(),
                    beta: self.leaf(ids.beta).clone(),
                    epsilon: DEFAULT_EPSILON,
                },
                CraParams {
                    w: self.leaf(ids.cra_w).clone(),
                    bn_gamma: self.leaf(ids.bn_gamma).clone(),
                    bn_beta: self.leaf(ids.bn_beta).clone(),
                    bn_momentum: DEFAULT_BN_MOMENTUM,
                    bn_epsilon: DEFAULT_BN_EPSILON,
                },
            )
        })
    }

    /// Adversarial domain classifier parameters, when the model has one.
    pub fn classifier(&self) -> Option<DomainClassifierParams> {
        self.model.ids.classifier.as_ref().map(|ids| DomainClassifierParams {
            hidden_w: self.leaf(ids.hidden_w).clone(),
            hidden_b: self.leaf(ids.hidden_b).clone(),
            out_w: self.leaf(ids.out_w).clone(),
            out_b: self.leaf(ids.out_b).clone(),
        })
    }

    fn stage_block(
        &self,
        tape: &mut GradientTape,
        stage: usize,
        x: &Tensor,
        mode: ForwardMode,
    ) -> Result<(Tensor, Option<DfdrSideOutputs>)> {
        let mut x = x.clone();
        for &(k, b) in &self.model.ids.convs[stage] {
            let conv = tape.conv2d(&x, self.leaf(k), self.leaf(b))?;
            x = tape.relu(&conv)?;
        }
        if let Some((affine, cra)) = self.dfdr_tensors(stage) {
            let running = self.model.cra_running[stage]
                .as_ref()
                .expect("running stats exist for masked stages");
            let (gain, side) =
                dfdr::dfdr_layer_forward(tape, &x, &affine, &cra, running, mode.cra_mode())?;
            Ok((gain, side))
        } else {
            Ok((x, None))
        }
    }

    /// Full backbone pass: per-stage conv → relu → (DFDR) → downsample.
    /// Returns the final features and, in train mode, per-stage side
    /// outputs (None for unmasked stages).
    pub fn backbone_forward(
        &self,
        tape: &mut GradientTape,
        images: &Tensor,
        mode: ForwardMode,
    ) -> Result<(Tensor, Vec<Option<DfdrSideOutputs>>)> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.model.cfg.input_channels {
            return Err(CoreError::ShapeMismatch(format!(
                "backbone expects N×{}×H×W, got {s:?}",
                self.model.cfg.input_channels
            )));
        }
        let stages = self.model.cfg.backbone.stages();
        let factor = self.model.cfg.backbone.downsample_factor();
        if s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "spatial size {}x{} not divisible by {factor}",
                s[2], s[3]
            )));
        }
        let mut x = images.clone();
        let mut sides = Vec::with_capacity(stages);
        for stage in 0..stages {
            let (out, side) = self.stage_block(tape, stage, &x, mode)?;
            sides.push(if mode == ForwardMode::Train { side } else { None });
            x = out;
            if stage + 1 < stages {
                x = tape.avg_pool2(&x)?;
            }
        }
        Ok((x, sides))
    }

    /// Resume the backbone after `after_stage` (used by the entropy
    /// branches): downsample, then run the remaining stages.
    pub fn forward_from_stage(
        &self,
        tape: &mut GradientTape,
        x: &Tensor,
        after_stage: usize,
        mode: ForwardMode,
    ) -> Result<Tensor> {
        let stages = self.model.cfg.backbone.stages();
        let mut x = x.clone();
        for stage in after_stage + 1..stages {
            x = tape.avg_pool2(&x)?;
            let (out, _) = self.stage_block(tape, stage, &x, mode)?;
            x = out;
        }
        Ok(x)
    }

    /// Task head. Segmentation upsamples the final features to input
    /// resolution and applies a per-pixel linear classifier; classification
    /// pools globally and applies a linear map.
    pub fn head_forward(&self, tape: &mut GradientTape, features: &Tensor) -> Result<Tensor> {
        let w = self.leaf(self.model.ids.head_w);
        let b = self.leaf(self.model.ids.head_b);
        match self.model.cfg.task_mode {
            TaskMode::Segmentation => {
                let factor = self.model.cfg.backbone.downsample_factor();
                let up = tape.upsample_nearest(features, factor)?;
                tape.pixel_linear(&up, w, b)
            }
            TaskMode::Classification => {
                let pooled = tape.mean(features, &[2, 3], false)?;
                tape.linear(&pooled, w, b)
            }
        }
    }

    /// Head logits without the upsampling step. Because nearest-neighbor
    /// upsampling duplicates values and the 1x1 classifier acts per pixel,
    /// any positionwise statistic averaged over all positions (such as the
    /// mean prediction entropy) is identical whether computed on these
    /// coarse logits or on the upsampled ones; the entropy branches use
    /// this form. Classification falls back to the regular head.
    pub fn head_forward_coarse(
        &self,
        tape: &mut GradientTape,
        features: &Tensor,
    ) -> Result<Tensor> {
        match self.model.cfg.task_mode {
            TaskMode::Segmentation => {
                let w = self.leaf(self.model.ids.head_w);
                let b = self.leaf(self.model.ids.head_b);
                tape.pixel_linear(features, w, b)
            }
            TaskMode::Classification => self.head_forward(tape, features),
        }
    }
}
