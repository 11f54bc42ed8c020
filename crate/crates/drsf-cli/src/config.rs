//! TOML configuration schemas. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use drsf_core::dfdr::TaskMode;
use drsf_core::synth::{BenchmarkSpec, SceneSpec, StyleTransform};
use drsf_core::train::{ExperimentConfig, UdaPlugin, UdaPluginConfig};

use crate::error::{CliError, Result};

fn d_lambda1() -> f64 {
    0.5
}
fn d_lambda2() -> f64 {
    0.8
}
fn d_lambda3() -> f64 {
    0.5
}
fn d_beta_alpha() -> f64 {
    2.0
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_batch() -> usize {
    8
}
fn d_steps() -> usize {
    3000
}
fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn d_mask() -> Vec<bool> {
    vec![true, true, true]
}
fn d_task() -> String {
    "segmentation".to_string()
}
fn d_k() -> usize {
    3
}
fn d_grl() -> f64 {
    1.0
}
fn d_data_dir() -> String {
    "data".to_string()
}

/// `drsf train` / `drsf ablate` configuration file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    #[serde(default = "d_lambda1")]
    pub lambda1: f64,
    #[serde(default = "d_lambda2")]
    pub lambda2: f64,
    #[serde(default = "d_lambda3")]
    pub lambda3: f64,
    #[serde(default = "d_beta_alpha")]
    pub beta_alpha: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_mask")]
    pub dfdr_mask: Vec<bool>,
    #[serde(default = "d_task")]
    pub task_mode: String,
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_grl")]
    pub grl_factor: f64,
    /// Directory holding the generated benchmark.
    #[serde(default = "d_data_dir")]
    pub data_dir: String,
    #[serde(default)]
    pub uda: Option<UdaFile>,
}

impl Default for TrainConfigFile {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct UdaFile {
    pub plugin: String,
    pub weight: f64,
}

pub fn parse_task_mode(s: &str) -> Result<TaskMode> {
    match s {
        "segmentation" => Ok(TaskMode::Segmentation),
        "classification" => Ok(TaskMode::Classification),
        other => Err(CliError::Config(format!(
            "task_mode must be \"segmentation\" or \"classification\", got {other:?}"
        ))),
    }
}

impl TrainConfigFile {
    pub fn to_experiment_config(&self) -> Result<ExperimentConfig> {
        let uda = match &self.uda {
            None => None,
            Some(u) => Some(UdaPluginConfig {
                plugin: UdaPlugin::from_name(&u.plugin).map_err(CliError::from)?,
                weight: u.weight,
            }),
        };
        let cfg = ExperimentConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            beta_alpha: self.beta_alpha,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            steps: self.steps,
            seeds: self.seeds.clone(),
            dfdr_mask: self.dfdr_mask.clone(),
            task_mode: parse_task_mode(&self.task_mode)?,
            k: self.k,
            grl_factor: self.grl_factor,
            uda,
        };
        cfg.validate().map_err(CliError::from)?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Benchmark generation config
// ---------------------------------------------------------------------------

fn d_image_size() -> usize {
    16
}
fn d_min_shapes() -> usize {
    1
}
fn d_max_shapes() -> usize {
    3
}
fn d_jitter() -> f64 {
    0.08
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_min_shapes")]
    pub min_shapes: usize,
    #[serde(default = "d_max_shapes")]
    pub max_shapes: usize,
    #[serde(default = "d_jitter")]
    pub color_jitter: f64,
}

impl Default for SceneFile {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn d_gains() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}
fn d_contrast() -> f64 {
    1.0
}
fn d_fog_color() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransformFile {
    pub name: String,
    #[serde(default)]
    pub brightness_shift: f64,
    #[serde(default = "d_gains")]
    pub channel_gains: [f64; 3],
    #[serde(default = "d_contrast")]
    pub contrast: f64,
    #[serde(default)]
    pub fog_alpha: f64,
    #[serde(default = "d_fog_color")]
    pub fog_color: [f64; 3],
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
}

impl From<&StyleTransform> for TransformFile {
    fn from(t: &StyleTransform) -> Self {
        TransformFile {
            name: t.name.clone(),
            brightness_shift: t.brightness_shift,
            channel_gains: t.channel_gains,
            contrast: t.contrast,
            fog_alpha: t.fog_alpha,
            fog_color: t.fog_color,
            noise_sigma: t.noise_sigma,
            seed: t.seed,
        }
    }
}

impl TransformFile {
    pub fn to_transform(&self) -> StyleTransform {
        StyleTransform {
            name: self.name.clone(),
            brightness_shift: self.brightness_shift,
            channel_gains: self.channel_gains,
            contrast: self.contrast,
            fog_alpha: self.fog_alpha,
            fog_color: self.fog_color,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }
}

fn d_train_per_domain() -> usize {
    2000
}
fn d_test_per_domain() -> usize {
    500
}
fn d_master_seed() -> u64 {
    42
}
fn d_margin() -> f64 {
    0.05
}

/// `drsf generate-data` configuration file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfigFile {
    #[serde(default = "d_train_per_domain")]
    pub train_per_domain: usize,
    #[serde(default = "d_test_per_domain")]
    pub test_per_domain: usize,
    #[serde(default = "d_master_seed")]
    pub master_seed: u64,
    #[serde(default = "d_margin")]
    pub min_transform_distance: f64,
    #[serde(default)]
    pub scene: SceneFile,
    #[serde(default)]
    pub source: Option<TransformFile>,
    #[serde(default)]
    pub pseudo: Vec<TransformFile>,
    #[serde(default)]
    pub targets: Vec<TransformFile>,
}

impl Default for BenchmarkConfigFile {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl BenchmarkConfigFile {
    pub fn to_spec(&self) -> BenchmarkSpec {
        let defaults = BenchmarkSpec::default();
        BenchmarkSpec {
            scene: SceneSpec {
                image_size: self.scene.image_size,
                min_shapes: self.scene.min_shapes,
                max_shapes: self.scene.max_shapes,
                color_jitter: self.scene.color_jitter,
                ..SceneSpec::default()
            },
            source: self
                .source
                .as_ref()
                .map_or(defaults.source.clone(), |t| t.to_transform()),
            pseudo: if self.pseudo.is_empty() {
                defaults.pseudo.clone()
            } else {
                self.pseudo.iter().map(|t| t.to_transform()).collect()
            },
            targets: if self.targets.is_empty() {
                defaults.targets.clone()
            } else {
                self.targets.iter().map(|t| t.to_transform()).collect()
            },
            train_per_domain: self.train_per_domain,
            test_per_domain: self.test_per_domain,
            master_seed: self.master_seed,
            min_transform_distance: self.min_transform_distance,
        }
    }
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_core_defaults() {
        let file = TrainConfigFile::default();
        let cfg = file.to_experiment_config().unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: std::result::Result<TrainConfigFile, _> = toml::from_str("lambda9 = 1.0");
        assert!(r.is_err());
    }

    #[test]
    fn task_mode_parsing() {
        assert!(parse_task_mode("segmentation").is_ok());
        assert!(parse_task_mode("classification").is_ok());
        assert!(parse_task_mode("detection").is_err());
    }

    #[test]
    fn uda_plugin_parsing() {
        let file: TrainConfigFile =
            toml::from_str("[uda]\nplugin = \"entropy-min\"\nweight = 0.1\n").unwrap();
        let cfg = file.to_experiment_config().unwrap();
        assert!(cfg.uda.is_some());
        let bad: TrainConfigFile =
            toml::from_str("[uda]\nplugin = \"nope\"\nweight = 0.1\n").unwrap();
        assert!(bad.to_experiment_config().is_err());
    }

    #[test]
    fn benchmark_defaults_round_trip() {
        let file = BenchmarkConfigFile::default();
        let spec = file.to_spec();
        assert_eq!(spec.pseudo.len(), 3);
        assert_eq!(spec.targets.len(), 2);
        assert_eq!(spec.master_seed, 42);
        assert_eq!(spec.scene.image_size, 16);
    }
}
