//! Ablation suites and the parallel run executor.
//!
//! A suite expands into a cross-product of configurations and seeds; each
//! (config, seed) run is independent and deterministic, so runs execute on
//! a small worker pool. `DRSF_THREADS` caps the parallelism.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use drsf_core::synth::Benchmark;
use drsf_core::train::{run_single, ExperimentConfig, MetricsRecord, RunResult};

use crate::error::{CliError, Result};

/// Ablation suite selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    /// 2³ on/off combinations of the align / rea / adv losses.
    LossToggles,
    /// DFDR insertion masks: none, each single stage, first stages, all.
    LayerMask,
    /// Pseudo-domain subsets: none, each single domain, all.
    PerPseudoDomain,
}

impl Suite {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "loss_toggles" => Ok(Suite::LossToggles),
            "layer_mask" => Ok(Suite::LayerMask),
            "per_pseudo_domain" => Ok(Suite::PerPseudoDomain),
            other => Err(CliError::Config(format!(
                "unknown suite {other:?} (expected loss_toggles, layer_mask, per_pseudo_domain)"
            ))),
        }
    }
}

/// One schedulable run.
#[derive(Clone)]
pub struct Job {
    pub label: String,
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub bench: Arc<Benchmark>,
}

/// Worker-pool cap from `DRSF_THREADS`, defaulting to the machine's
/// available parallelism.
pub fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("DRSF_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Execute jobs on up to `threads` workers; results return in job order.
pub fn run_jobs(jobs: Vec<Job>, threads: usize) -> Result<Vec<RunResult>> {
    let total = jobs.len();
    let queue: Arc<Mutex<VecDeque<(usize, Job)>>> =
        Arc::new(Mutex::new(jobs.into_iter().enumerate().collect()));
    let results: Arc<Mutex<Vec<Option<std::result::Result<RunResult, String>>>>> =
        Arc::new(Mutex::new((0..total).map(|_| None).collect()));
    let workers = threads.clamp(1, total.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let queue = Arc::clone(&queue);
            let results = Arc::clone(&results);
            scope.spawn(move || loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some((idx, job)) = next else { break };
                let start = Instant::now();
                let outcome = run_single(&job.cfg, &job.bench, job.seed, &job.label, || {
                    start.elapsed().as_secs_f64() * 1e3
                })
                .map_err(|e| e.to_string());
                results.lock().expect("results lock")[idx] = Some(outcome);
            });
        }
    });
    let collected = Arc::try_unwrap(results)
        .map_err(|_| CliError::Data("worker results leaked".into()))?
        .into_inner()
        .map_err(|_| CliError::Data("poisoned results lock".into()))?;
    collected
        .into_iter()
        .map(|r| match r.expect("every job ran") {
            Ok(v) => Ok(v),
            Err(m) => Err(CliError::Numeric(m)),
        })
        .collect()
}

/// Aggregated row of an ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Mean metric over unseen targets, one entry per seed.
    pub mpt_per_seed: Vec<f64>,
    pub mpt_mean: f64,
    pub mpt_stddev: f64,
    /// Per-domain metric means across seeds.
    pub domain_means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub records: Vec<MetricsRecord>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Benchmark view with a subset of the pseudo-domains.
fn pseudo_subset(bench: &Benchmark, keep: &[usize]) -> Benchmark {
    Benchmark {
        source_train: bench.source_train.clone(),
        source_eval: bench.source_eval.clone(),
        pseudo: keep.iter().map(|&i| bench.pseudo[i].clone()).collect(),
        targets: bench.targets.clone(),
    }
}

/// Expand a suite into labelled (config, benchmark) variants.
pub fn suite_variants(
    suite: Suite,
    base: &ExperimentConfig,
    bench: &Arc<Benchmark>,
) -> Vec<(String, ExperimentConfig, Arc<Benchmark>)> {
    match suite {
        Suite::LossToggles => {
            let mut out = Vec::new();
            for bits in 0..8u32 {
                let align = bits & 1 != 0;
                let rea = bits & 2 != 0;
                let adv = bits & 4 != 0;
                let mut parts = Vec::new();
                if align {
                    parts.push("align");
                }
                if rea {
                    parts.push("rea");
                }
                if adv {
                    parts.push("adv");
                }
                let label = if parts.is_empty() {
                    "none".to_string()
                } else {
                    parts.join("+")
                };
                let cfg = ExperimentConfig {
                    lambda1: if align { base.lambda1 } else { 0.0 },
                    lambda2: if rea { base.lambda2 } else { 0.0 },
                    lambda3: if adv { base.lambda3 } else { 0.0 },
                    ..base.clone()
                };
                out.push((label, cfg, Arc::clone(bench)));
            }
            out
        }
        Suite::LayerMask => {
            let stages = base.dfdr_mask.len();
            let mut masks: Vec<(String, Vec<bool>)> = Vec::new();
            masks.push(("none".into(), vec![false; stages]));
            for s in 0..stages {
                let mut m = vec![false; stages];
                m[s] = true;
                masks.push((format!("s{}", s + 1), m));
            }
            if stages >= 2 {
                // all but the final stage
                let mut m = vec![true; stages];
                m[stages - 1] = false;
                let label: String =
                    (1..stages).fold("s".to_string(), |acc, s| format!("{acc}{s}"));
                masks.push((label, m));
            }
            masks.push((
                (1..=stages).fold("s".to_string(), |acc, s| format!("{acc}{s}")),
                vec![true; stages],
            ));
            masks
                .into_iter()
                .map(|(label, mask)| {
                    let cfg = ExperimentConfig {
                        dfdr_mask: mask,
                        ..base.clone()
                    };
                    (label, cfg, Arc::clone(bench))
                })
                .collect()
        }
        Suite::PerPseudoDomain => {
            let mut out = Vec::new();
            let baseline = ExperimentConfig {
                k: 0,
                ..base.clone()
            };
            out.push(("baseline".to_string(), baseline, Arc::clone(bench)));
            for (i, p) in bench.pseudo.iter().enumerate() {
                let cfg = ExperimentConfig {
                    k: 1,
                    ..base.clone()
                };
                out.push((
                    format!("+{}", p.manifest.domain_name),
                    cfg,
                    Arc::new(pseudo_subset(bench, &[i])),
                ));
            }
            let all = ExperimentConfig {
                k: bench.pseudo.len(),
                ..base.clone()
            };
            out.push(("+all".to_string(), all, Arc::clone(bench)));
            out
        }
    }
}

/// Run a full suite: every variant × every seed, aggregated per variant.
pub fn run_suite(
    suite: Suite,
    base: &ExperimentConfig,
    bench: Arc<Benchmark>,
    threads: usize,
) -> Result<AblationOutcome> {
    let variants = suite_variants(suite, base, &bench);
    let mut jobs = Vec::new();
    for (label, cfg, b) in &variants {
        for &seed in &base.seeds {
            jobs.push(Job {
                label: format!("{label}/seed{seed}"),
                cfg: cfg.clone(),
                seed,
                bench: Arc::clone(b),
            });
        }
    }
    let results = run_jobs(jobs, threads)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let seeds_per = base.seeds.len();
    for (vi, (label, _, _)) in variants.iter().enumerate() {
        let runs = &results[vi * seeds_per..(vi + 1) * seeds_per];
        let mpt_per_seed: Vec<f64> = runs.iter().map(|r| r.mpt).collect();
        let (mpt_mean, mpt_stddev) = mean_std(&mpt_per_seed);
        let mut domain_values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in runs {
            for (d, m) in &r.per_domain {
                domain_values.entry(d.clone()).or_default().push(*m);
            }
            records.extend(r.records.iter().cloned());
        }
        rows.push(AblationRow {
            label: label.clone(),
            seeds: base.seeds.clone(),
            mpt_per_seed,
            mpt_mean,
            mpt_stddev,
            domain_means: domain_values
                .into_iter()
                .map(|(d, vs)| {
                    let n = vs.len() as f64;
                    (d, vs.iter().sum::<f64>() / n)
                })
                .collect(),
        });
    }
    Ok(AblationOutcome { rows, records })
}

/// Plain-text table: label, runs, mPT mean ± stddev per row.
pub fn render_table(outcome: &AblationOutcome) -> String {
    let mut s = String::from("label,seeds,mpt_mean,mpt_stddev\n");
    for row in &outcome.rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            row.label,
            row.seeds.len(),
            row.mpt_mean,
            row.mpt_stddev
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use drsf_core::synth::{build_benchmark, BenchmarkSpec};

    fn tiny_bench() -> Arc<Benchmark> {
        Arc::new(
            build_benchmark(&BenchmarkSpec {
                train_per_domain: 8,
                test_per_domain: 4,
                ..BenchmarkSpec::default()
            })
            .unwrap(),
        )
    }

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            steps: 1,
            batch_size: 2,
            seeds: vec![1, 2],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn loss_toggles_has_eight_variants() {
        let bench = tiny_bench();
        let variants = suite_variants(Suite::LossToggles, &tiny_cfg(), &bench);
        assert_eq!(variants.len(), 8);
        let labels: Vec<&str> = variants.iter().map(|(l, _, _)| l.as_str()).collect();
        assert!(labels.contains(&"none"));
        assert!(labels.contains(&"align+rea+adv"));
    }

    #[test]
    fn layer_mask_matches_table_pattern() {
        let bench = tiny_bench();
        let variants = suite_variants(Suite::LayerMask, &tiny_cfg(), &bench);
        let labels: Vec<&str> = variants.iter().map(|(l, _, _)| l.as_str()).collect();
        assert_eq!(labels, vec!["none", "s1", "s2", "s3", "s12", "s123"]);
    }

    #[test]
    fn per_pseudo_domain_rows() {
        let bench = tiny_bench();
        let variants = suite_variants(Suite::PerPseudoDomain, &tiny_cfg(), &bench);
        let labels: Vec<&str> = variants.iter().map(|(l, _, _)| l.as_str()).collect();
        assert_eq!(labels, vec!["baseline", "+night", "+fog", "+dusk", "+all"]);
        assert_eq!(variants[1].2.pseudo.len(), 1);
        assert_eq!(variants[1].1.k, 1);
        assert_eq!(variants[0].1.k, 0);
    }

    #[test]
    fn parallel_runs_match_serial_runs() {
        let bench = tiny_bench();
        let cfg = tiny_cfg();
        let jobs: Vec<Job> = [3u64, 4, 5]
            .iter()
            .map(|&seed| Job {
                label: format!("seed{seed}"),
                cfg: cfg.clone(),
                seed,
                bench: Arc::clone(&bench),
            })
            .collect();
        let serial = run_jobs(jobs.clone(), 1).unwrap();
        let parallel = run_jobs(jobs, 2).unwrap();
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.mpt.to_bits(), b.mpt.to_bits());
        }
    }

    #[test]
    fn suite_row_counts() {
        let bench = tiny_bench();
        let cfg = tiny_cfg();
        let outcome = run_suite(Suite::LayerMask, &cfg, bench, 2).unwrap();
        assert_eq!(outcome.rows.len(), 6);
        // 6 rows x 2 seeds x 3 eval domains
        assert_eq!(outcome.records.len(), 6 * 2 * 3);
        for row in &outcome.rows {
            assert_eq!(row.mpt_per_seed.len(), 2);
        }
    }
}
