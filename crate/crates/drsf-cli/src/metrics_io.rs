//! Metrics persistence: a CSV of per-domain records and a JSON summary.
//!
//! Numeric fields are written with Rust's shortest round-trip formatting,
//! so parsing the CSV back recovers every value exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use drsf_core::hash::fnv64;
use drsf_core::train::MetricsRecord;

use crate::error::{CliError, Result};

pub const CSV_HEADER: &str =
    "run_id,seed,step,domain,metric,loss_task,loss_align,loss_rea,loss_adv,loss_uda,wall_ms";

pub fn render_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.seed,
            r.step,
            r.domain,
            r.metric,
            r.loss_task,
            r.loss_align,
            r.loss_rea,
            r.loss_adv,
            r.loss_uda,
            r.wall_ms
        ));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::Data("empty metrics CSV".into()))?;
    if header != CSV_HEADER {
        return Err(CliError::Data(format!("unexpected CSV header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(CliError::Data(format!("row {i}: {} fields", fields.len())));
        }
        let f = |j: usize| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| CliError::Data(format!("row {i} field {j}: {:?}", fields[j])))
        };
        out.push(MetricsRecord {
            run_id: fields[0].to_string(),
            seed: fields[1]
                .parse()
                .map_err(|_| CliError::Data(format!("row {i}: bad seed")))?,
            step: fields[2]
                .parse()
                .map_err(|_| CliError::Data(format!("row {i}: bad step")))?,
            domain: fields[3].to_string(),
            metric: f(4)?,
            loss_task: f(5)?,
            loss_align: f(6)?,
            loss_rea: f(7)?,
            loss_adv: f(8)?,
            loss_uda: f(9)?,
            wall_ms: f(10)?,
        });
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Write `metrics.csv` plus `summary.json` (config echo, final per-domain
/// metric mean/stddev over all rows, and the CSV content hash).
pub fn emit_metrics(
    records: &[MetricsRecord],
    config_echo: &impl serde::Serialize,
    dir: &Path,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv = render_csv(records);
    let csv_path = dir.join("metrics.csv");
    fs::write(&csv_path, &csv)?;

    let mut by_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_domain.entry(r.domain.clone()).or_default().push(r.metric);
    }
    let domains: BTreeMap<String, serde_json::Value> = by_domain
        .iter()
        .map(|(d, vals)| {
            let (mean, std) = mean_std(vals);
            (
                d.clone(),
                serde_json::json!({"mean": mean, "stddev": std, "runs": vals.len()}),
            )
        })
        .collect();
    let summary = serde_json::json!({
        "config": serde_json::to_value(config_echo)
            .map_err(|e| CliError::Data(format!("config echo: {e}")))?,
        "domains": domains,
        "rows": records.len(),
        "csv_content_hash": format!("{:016x}", fnv64(csv.as_bytes())),
    });
    let json_path = dir.join("summary.json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&summary)
            .map_err(|e| CliError::Data(format!("summary serialization: {e}")))?,
    )?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(domain: &str, metric: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: "r0".into(),
            seed: 1,
            step: 10,
            domain: domain.into(),
            metric,
            loss_task: 0.123456789012345,
            loss_align: 1.0 / 3.0,
            loss_rea: 2.0 * std::f64::consts::LN_2,
            loss_adv: 0.0,
            loss_uda: 0.0,
            wall_ms: 1234.5,
        }
    }

    #[test]
    fn empty_record_list_gives_header_only_csv() {
        assert_eq!(render_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let records = vec![record("deep-night", 0.25), record("fog-dim", 1.0 / 7.0)];
        let csv = render_csv(&records);
        let parsed = parse_csv(&csv).unwrap();
        assert_eq!(parsed.len(), 2);
        for (a, b) in records.iter().zip(&parsed) {
            assert_eq!(a.metric.to_bits(), b.metric.to_bits());
            assert_eq!(a.loss_align.to_bits(), b.loss_align.to_bits());
            assert_eq!(a.loss_rea.to_bits(), b.loss_rea.to_bits());
            assert_eq!(a.wall_ms.to_bits(), b.wall_ms.to_bits());
        }
    }

    #[test]
    fn summary_mean_matches_csv_rows() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            record("t1", 0.4),
            record("t1", 0.6),
            record("t2", 0.5),
        ];
        let (csv_path, json_path) =
            emit_metrics(&records, &serde_json::json!({"steps": 10}), dir.path()).unwrap();
        let csv = fs::read_to_string(csv_path).unwrap();
        let parsed = parse_csv(&csv).unwrap();
        let t1: Vec<f64> = parsed
            .iter()
            .filter(|r| r.domain == "t1")
            .map(|r| r.metric)
            .collect();
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(json_path).unwrap()).unwrap();
        let mean = summary["domains"]["t1"]["mean"].as_f64().unwrap();
        assert_eq!(mean, t1.iter().sum::<f64>() / t1.len() as f64);
        let hash = summary["csv_content_hash"].as_str().unwrap();
        assert_eq!(hash, format!("{:016x}", fnv64(csv.as_bytes())));
    }
}
