//! `drsf` command-line interface.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};

use drsf_cli::ablation::{self, Suite};
use drsf_cli::checkpoint_io::{checkpoint_hash, load_checkpoint, save_checkpoint};
use drsf_cli::config::{load_toml, BenchmarkConfigFile, TrainConfigFile};
use drsf_cli::dataset_io::{load_benchmark, load_dataset, save_benchmark};
use drsf_cli::error::{CliError, Result};
use drsf_cli::metrics_io::emit_metrics;
use drsf_core::eval::mean_performance;
use drsf_core::synth::build_benchmark;
use drsf_core::train::{evaluate, run_single_with_model, MetricsRecord};

#[derive(Parser)]
#[command(name = "drsf", version, about = "Domain reassembly and soft-fusion experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the multi-domain benchmark datasets.
    GenerateData {
        /// Benchmark TOML config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration over its seed list.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every dataset in a benchmark directory
    /// (or on a single dataset file).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an ablation suite: loss_toggles, layer_mask, or
    /// per_pseudo_domain.
    Ablate {
        #[arg(long)]
        suite: String,
        /// Train TOML config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every differentiable operation.
    GradCheck,
}

fn cmd_generate_data(config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let file = match config {
        Some(p) => load_toml::<BenchmarkConfigFile>(&p)?,
        None => BenchmarkConfigFile::default(),
    };
    let spec = file.to_spec();
    let bench = build_benchmark(&spec).map_err(CliError::from)?;
    save_benchmark(&bench, &out)?;
    println!(
        "wrote source train/eval, {} pseudo-domains, {} targets to {}",
        bench.pseudo.len(),
        bench.targets.len(),
        out.display()
    );
    for d in bench.pseudo.iter().chain(bench.targets.iter()) {
        println!(
            "  {}: {} images, content hash {:016x}",
            d.manifest.domain_name, d.manifest.images, d.manifest.content_hash
        );
    }
    Ok(())
}

fn cmd_train(config: PathBuf, out: PathBuf) -> Result<()> {
    let file = load_toml::<TrainConfigFile>(&config)?;
    let cfg = file.to_experiment_config()?;
    let bench = Arc::new(load_benchmark(&PathBuf::from(&file.data_dir))?);
    std::fs::create_dir_all(&out)?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    for &seed in &cfg.seeds {
        let start = Instant::now();
        let run_id = format!("train/seed{seed}");
        let (result, model) = run_single_with_model(&cfg, &bench, seed, &run_id, || {
            start.elapsed().as_secs_f64() * 1e3
        })
        .map_err(CliError::from)?;
        let ck = out.join(format!("model_seed{seed}.drsfck"));
        save_checkpoint(&model, &ck)?;
        println!(
            "seed {seed}: mPT {:.4}, checkpoint {} (hash {:016x})",
            result.mpt,
            ck.display(),
            checkpoint_hash(&model)
        );
        for (domain, metric) in &result.per_domain {
            println!("  {domain}: {metric:.4}");
        }
        records.extend(result.records);
    }
    let (csv, json) = emit_metrics(&records, &file, &out)?;
    println!("metrics: {}", csv.display());
    println!("summary: {}", json.display());
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, data: PathBuf) -> Result<()> {
    let model = load_checkpoint(&checkpoint)?;
    let task_mode = model.cfg.task_mode;
    let mut metrics = Vec::new();
    if data.is_dir() {
        let bench = load_benchmark(&data)?;
        let src = evaluate(&model, &bench.source_eval, task_mode).map_err(CliError::from)?;
        println!("{}: {src:.4}", bench.source_eval.manifest.domain_name);
        for t in &bench.targets {
            let m = evaluate(&model, t, task_mode).map_err(CliError::from)?;
            println!("{}: {m:.4}", t.manifest.domain_name);
            metrics.push(m);
        }
    } else {
        let ds = load_dataset(&data)?;
        let m = evaluate(&model, &ds, task_mode).map_err(CliError::from)?;
        println!("{}: {m:.4}", ds.manifest.domain_name);
        metrics.push(m);
    }
    if metrics.len() > 1 {
        println!("mPT: {:.4}", mean_performance(&metrics).map_err(CliError::from)?);
    }
    Ok(())
}

fn cmd_ablate(suite: String, config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let suite = Suite::from_name(&suite)?;
    let file = match config {
        Some(p) => load_toml::<TrainConfigFile>(&p)?,
        None => TrainConfigFile::default(),
    };
    let cfg = file.to_experiment_config()?;
    let bench = Arc::new(load_benchmark(&PathBuf::from(&file.data_dir))?);
    let threads = ablation::thread_cap();
    let outcome = ablation::run_suite(suite, &cfg, bench, threads)?;
    std::fs::create_dir_all(&out)?;
    let table = ablation::render_table(&outcome);
    std::fs::write(out.join("table.csv"), &table)?;
    print!("{table}");
    let (csv, json) = emit_metrics(&outcome.records, &file, &out)?;
    println!("metrics: {}", csv.display());
    println!("summary: {}", json.display());
    Ok(())
}

fn cmd_grad_check() -> Result<()> {
    let results = drsf_core::gradcheck::standard_suite(2024, 5, 1e-5).map_err(CliError::from)?;
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<28} max relative error {:.3e}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    if worst < 1e-5 {
        println!("all {} checks under 1e-5", results.len());
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "worst relative error {worst:.3e} exceeds 1e-5"
        )))
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenerateData { config, out } => cmd_generate_data(config, out),
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval { checkpoint, data } => cmd_eval(checkpoint, data),
        Command::Ablate { suite, config, out } => cmd_ablate(suite, config, out),
        Command::GradCheck => cmd_grad_check(),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
