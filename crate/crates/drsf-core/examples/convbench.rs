//! Rough throughput probe for the conv kernels, used to size defaults.

use std::time::Instant;

use drsf_core::tensor::kernels_bench::{bench_backward, bench_forward};

fn main() {
    for &(n, cin, cout, h, w) in &[
        (8usize, 3usize, 16usize, 32usize, 32usize),
        (8, 16, 32, 16, 16),
        (8, 32, 64, 8, 8),
        (8, 3, 16, 16, 16),
        (8, 16, 32, 8, 8),
        (8, 32, 64, 4, 4),
    ] {
        let macs = (n * cin * cout * 9 * h * w) as f64;
        let reps = (2e9 / macs).max(1.0) as usize;
        let t0 = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            sink += bench_forward(n, cin, cout, h, w);
        }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64;
        let t0 = Instant::now();
        for _ in 0..reps {
            sink += bench_backward(n, cin, cout, h, w);
        }
        let bwd = t0.elapsed().as_secs_f64() / reps as f64;
        println!(
            "conv {n}x{cin}->{cout}@{h}x{w}: fwd {:.3} ms ({:.2} GFLOP/s), fwd+bwd {:.3} ms  [{sink:.1}]",
            fwd * 1e3,
            2.0 * macs / fwd / 1e9,
            (fwd + bwd) * 1e3,
        );
    }
}
