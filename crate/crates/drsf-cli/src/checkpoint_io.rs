//! Model checkpoint format: a plain-text manifest (model configuration,
//! entry names/shapes, content hash) followed by concatenated
//! little-endian f64 blocks in manifest order. Entries load by name with
//! strict shape checking.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use drsf_core::dfdr::TaskMode;
use drsf_core::hash::Fnv64;
use drsf_core::model::{BackboneConfig, Model, ModelConfig};
use drsf_core::rng::RngStream;

use crate::error::{CliError, Result};

const MAGIC: &str = "DRSF-CHECKPOINT";
const VERSION: u32 = 1;

fn content_hash(entries: &[(String, Vec<usize>, Vec<f64>)]) -> u64 {
    let mut h = Fnv64::new();
    for (name, shape, values) in entries {
        h.update(name.as_bytes());
        for d in shape {
            h.update(&(*d as u64).to_le_bytes());
        }
        h.update_f64_le(values);
    }
    h.finish()
}

fn task_mode_str(mode: TaskMode) -> &'static str {
    match mode {
        TaskMode::Segmentation => "segmentation",
        TaskMode::Classification => "classification",
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let entries = model.state_entries();
    let cfg = &model.cfg;
    let mut head = String::new();
    head.push_str(&format!("{MAGIC} v{VERSION}\n"));
    head.push_str(&format!(
        "stage_channels = {}\n",
        cfg.backbone
            .stage_channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    head.push_str(&format!("blocks_per_stage = {}\n", cfg.backbone.blocks_per_stage));
    head.push_str(&format!(
        "dfdr_mask = {}\n",
        cfg.backbone
            .dfdr_mask
            .iter()
            .map(|&m| if m { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(",")
    ));
    head.push_str(&format!("task_mode = {}\n", task_mode_str(cfg.task_mode)));
    head.push_str(&format!("class_count = {}\n", cfg.class_count));
    head.push_str(&format!("input_channels = {}\n", cfg.input_channels));
    head.push_str(&format!("domains = {}\n", cfg.domains));
    head.push_str(&format!("classifier_hidden = {}\n", cfg.classifier_hidden));
    head.push_str("dtype = f64le\n");
    head.push_str(&format!("content_hash = {:016x}\n", content_hash(&entries)));
    for (name, shape, _) in &entries {
        let dims = shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        head.push_str(&format!("entry = {name} [{dims}]\n"));
    }
    head.push_str("END-MANIFEST\n");

    let mut f = fs::File::create(path)?;
    f.write_all(head.as_bytes())?;
    let mut buf = Vec::new();
    for (_, _, values) in &entries {
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

/// Content hash of a saved checkpoint (for determinism checks).
pub fn checkpoint_hash(model: &Model) -> u64 {
    content_hash(&model.state_entries())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let end_tag = b"END-MANIFEST\n";
    let end = bytes
        .windows(end_tag.len())
        .position(|w| w == end_tag)
        .ok_or_else(|| corrupt(path, "missing END-MANIFEST"))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt(path, "manifest is not UTF-8"))?;
    let body = &bytes[end + end_tag.len()..];

    let mut lines = header.lines();
    let first = lines.next().ok_or_else(|| corrupt(path, "empty manifest"))?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| corrupt(path, "not a checkpoint file"))?;
    if version != VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let mut kv = BTreeMap::new();
    let mut entry_specs: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        let Some((k, v)) = line.split_once('=') else { continue };
        let (k, v) = (k.trim(), v.trim());
        if k == "entry" {
            let (name, dims) = v
                .split_once('[')
                .ok_or_else(|| corrupt(path, format!("bad entry line {v:?}")))?;
            let dims = dims.trim_end_matches(']');
            let shape: Vec<usize> = if dims.is_empty() {
                vec![]
            } else {
                dims.split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| corrupt(path, format!("bad dims in {v:?}")))?
            };
            entry_specs.push((name.trim().to_string(), shape));
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| corrupt(path, format!("missing key {k}")))
    };
    let stage_channels: Vec<usize> = get("stage_channels")?
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| corrupt(path, "bad stage_channels"))?;
    let dfdr_mask: Vec<bool> = get("dfdr_mask")?
        .split(',')
        .map(|m| m.trim() == "1")
        .collect();
    let task_mode = match get("task_mode")?.as_str() {
        "segmentation" => TaskMode::Segmentation,
        "classification" => TaskMode::Classification,
        other => return Err(corrupt(path, format!("bad task_mode {other:?}"))),
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| corrupt(path, format!("bad {k}")))
    };
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            stage_channels,
            blocks_per_stage: parse_usize("blocks_per_stage")?,
            dfdr_mask,
        },
        task_mode,
        class_count: parse_usize("class_count")?,
        input_channels: parse_usize("input_channels")?,
        domains: parse_usize("domains")?,
        classifier_hidden: parse_usize("classifier_hidden")?,
    };
    let stored_hash = u64::from_str_radix(get("content_hash")?, 16)
        .map_err(|_| corrupt(path, "bad content_hash"))?;

    let total_values: usize = entry_specs
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if body.len() != total_values * 8 {
        return Err(corrupt(
            path,
            format!("payload is {} bytes, expected {}", body.len(), total_values * 8),
        ));
    }
    let mut entries = Vec::with_capacity(entry_specs.len());
    let mut offset = 0usize;
    for (name, shape) in entry_specs {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for chunk in body[offset..offset + n * 8].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().expect("8 bytes")));
        }
        offset += n * 8;
        entries.push((name, shape, values));
    }
    if content_hash(&entries) != stored_hash {
        return Err(corrupt(path, "content hash mismatch"));
    }

    let mut rng = RngStream::new(0);
    let mut model = Model::new(cfg, &mut rng).map_err(CliError::from)?;
    model.load_state(&entries).map_err(CliError::from)?;
    Ok(model)
}
