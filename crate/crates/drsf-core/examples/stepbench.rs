//! Wall-clock probe for full training steps and evaluation at the default
//! benchmark scale.

use std::time::Instant;

use drsf_core::synth::{build_benchmark, BenchmarkSpec};
use drsf_core::train::{evaluate, ExperimentConfig, Trainer};

fn main() {
    let spec = BenchmarkSpec {
        train_per_domain: 200,
        test_per_domain: 100,
        ..BenchmarkSpec::default()
    };
    let t0 = Instant::now();
    let bench = build_benchmark(&spec).unwrap();
    println!("benchmark generation (200+100 x 6 domains): {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);

    for (label, k, mask, lambdas) in [
        ("full DRSF k=3 mask TTT", 3usize, vec![true, true, true], (0.5, 0.8, 0.5)),
        ("TTT align only", 3, vec![true, true, true], (0.5, 0.0, 0.0)),
        ("TTT rea only", 3, vec![true, true, true], (0.0, 0.8, 0.0)),
        ("TTT adv only", 3, vec![true, true, true], (0.0, 0.0, 0.5)),
        ("TTT no losses", 3, vec![true, true, true], (0.0, 0.0, 0.0)),
        ("mask TTF", 3, vec![true, true, false], (0.5, 0.8, 0.5)),
        ("mask FFF (adv only possible)", 3, vec![false, false, false], (0.5, 0.8, 0.5)),
        ("source-only", 0, vec![false, false, false], (0.0, 0.0, 0.0)),
    ] {
        let cfg = ExperimentConfig {
            k,
            dfdr_mask: mask,
            lambda1: lambdas.0,
            lambda2: lambdas.1,
            lambda3: lambdas.2,
            ..ExperimentConfig::default()
        };
        let mut trainer = Trainer::new(cfg, &bench, 1).unwrap();
        // warmup
        for _ in 0..3 {
            let b = trainer.sample_batches(&bench).unwrap();
            trainer.train_step(&b).unwrap();
        }
        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            let b = trainer.sample_batches(&bench).unwrap();
            trainer.train_step(&b).unwrap();
        }
        let per = t0.elapsed().as_secs_f64() / reps as f64;
        println!(
            "{label}: {:.2} ms/step → {:.0} s per 3000-step run",
            per * 1e3,
            per * 3000.0
        );
    }
    let cfg = ExperimentConfig::default();
    let trainer = Trainer::new(cfg, &bench, 1).unwrap();
    let t0 = Instant::now();
    let m = evaluate(&trainer.model, &bench.targets[0], drsf_core::dfdr::TaskMode::Segmentation).unwrap();
    println!("eval 100 images: {:.1} ms (metric {m:.3})", t0.elapsed().as_secs_f64() * 1e3);
}
