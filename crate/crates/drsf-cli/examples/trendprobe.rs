//! Quick directional probe of the SDG trends at reduced scale.

use std::sync::Arc;

use drsf_cli::ablation::{run_jobs, Job};
use drsf_core::synth::{build_benchmark, BenchmarkSpec};
use drsf_core::train::ExperimentConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seeds: Vec<u64> = args
        .get(2)
        .and_then(|s| s.parse().ok())
        .map(|n: u64| (1..=n).collect())
        .unwrap_or_else(|| vec![1, 2]);

    let bench = Arc::new(build_benchmark(&BenchmarkSpec::default()).unwrap());
    let base = ExperimentConfig {
        steps,
        ..ExperimentConfig::default()
    };

    let mut variants: Vec<(String, ExperimentConfig)> = Vec::new();
    variants.push((
        "source-only".into(),
        ExperimentConfig {
            k: 0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            dfdr_mask: vec![false, false, false],
            ..base.clone()
        },
    ));
    variants.push((
        "aug-none".into(),
        ExperimentConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..base.clone()
        },
    ));
    variants.push((
        "align".into(),
        ExperimentConfig {
            lambda2: 0.0,
            lambda3: 0.0,
            ..base.clone()
        },
    ));
    variants.push((
        "rea".into(),
        ExperimentConfig {
            lambda1: 0.0,
            lambda3: 0.0,
            ..base.clone()
        },
    ));
    variants.push((
        "adv".into(),
        ExperimentConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..base.clone()
        },
    ));
    variants.push((
        "align+rea".into(),
        ExperimentConfig {
            lambda3: 0.0,
            ..base.clone()
        },
    ));
    variants.push((
        "align+adv".into(),
        ExperimentConfig {
            lambda2: 0.0,
            ..base.clone()
        },
    ));
    variants.push((
        "rea+adv".into(),
        ExperimentConfig {
            lambda1: 0.0,
            ..base.clone()
        },
    ));
    variants.push(("full".into(), base.clone()));
    variants.push((
        "mask-none".into(),
        ExperimentConfig {
            dfdr_mask: vec![false, false, false],
            ..base.clone()
        },
    ));
    for (label, mask) in [
        ("mask-s1", vec![true, false, false]),
        ("mask-s2", vec![false, true, false]),
        ("mask-s3", vec![false, false, true]),
        ("mask-s12", vec![true, true, false]),
    ] {
        variants.push((
            label.into(),
            ExperimentConfig {
                dfdr_mask: mask,
                ..base.clone()
            },
        ));
    }

    let mut jobs = Vec::new();
    for (label, cfg) in &variants {
        for &seed in &seeds {
            jobs.push(Job {
                label: format!("{label}/s{seed}"),
                cfg: cfg.clone(),
                seed,
                bench: Arc::clone(&bench),
            });
        }
    }
    let t0 = std::time::Instant::now();
    let results = run_jobs(jobs, 2).unwrap();
    let per = seeds.len();
    println!(
        "steps={steps} seeds={:?} wall={:.0}s",
        seeds,
        t0.elapsed().as_secs_f64()
    );
    println!("{:<14} {:>8} {:>8}  per-domain(first seed)", "variant", "mPT", "src");
    for (vi, (label, _)) in variants.iter().enumerate() {
        let runs = &results[vi * per..(vi + 1) * per];
        let mpt: f64 = runs.iter().map(|r| r.mpt).sum::<f64>() / per as f64;
        let src: f64 = runs.iter().map(|r| r.per_domain[0].1).sum::<f64>() / per as f64;
        let detail: Vec<String> = runs[0]
            .per_domain
            .iter()
            .map(|(d, m)| format!("{d}={m:.3}"))
            .collect();
        println!("{label:<14} {mpt:>8.4} {src:>8.4}  {}", detail.join(" "));
    }
}
