//! Loss-component dynamics probe for one full-DRSF run.

use drsf_core::synth::{build_benchmark, BenchmarkSpec};
use drsf_core::train::{evaluate, ExperimentConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let bench = build_benchmark(&BenchmarkSpec::default()).unwrap();
    let cfg = ExperimentConfig {
        steps,
        ..ExperimentConfig::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), &bench, 1).unwrap();
    println!(
        "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "step", "task", "align", "rea", "adv", "total"
    );
    for step in 0..steps {
        let batches = trainer.sample_batches(&bench).unwrap();
        let l = trainer.train_step(&batches).unwrap();
        if step % 250 == 0 || step + 1 == steps {
            println!(
                "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                step, l.task, l.align, l.rea, l.adv, l.total
            );
        }
    }
    for (name, ds) in [("day-eval", &bench.source_eval)]
        .into_iter()
        .chain(bench.targets.iter().map(|t| (t.manifest.domain_name.as_str(), t)))
    {
        let m = evaluate(&trainer.model, ds, cfg.task_mode).unwrap();
        println!("{name}: {m:.4}");
    }
}
