//! Central-finite-difference gradient verification.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{GradientTape, Tensor};

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut GradientTape, &Tensor) -> Result<Tensor>,
{
    let mut tape = GradientTape::new();
    let xl = tape.leaf(x, true);
    let y = f(&mut tape, &xl)?;
    y.item()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = crate::math::abs(a).max(crate::math::abs(b)).max(1e-8);
    crate::math::abs(a - b) / denom
}

/// Compare the tape gradient of scalar-valued `f` at `x` against central
/// differences with the given step, coordinate by coordinate. Returns the
/// worst relative error (absolute floor 1e-8 in the denominator).
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut GradientTape, &Tensor) -> Result<Tensor>,
{
    debug_assert!((1e-7..=1e-3).contains(&step), "step {step} outside supported range");
    let mut tape = GradientTape::new();
    let xl = tape.leaf(x, true);
    let y = f(&mut tape, &xl)?;
    if y.len() != 1 {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "grad_check needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    let grads = tape.backward(&y)?;
    let analytic = grads.get_or_zeros(&xl);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.values().to_vec();
        plus[i] += step;
        let mut minus = x.values().to_vec();
        minus[i] -= step;
        let fp = eval_scalar(&f, &Tensor::new(x.shape(), plus)?)?;
        let fm = eval_scalar(&f, &Tensor::new(x.shape(), minus)?)?;
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_err(analytic.values()[i], fd));
    }
    Ok(worst)
}

/// Like [`grad_check`] for a function of several tensors, probing only the
/// listed `(tensor index, coordinate)` pairs. All inputs are registered as
/// requires-grad leaves.
pub fn grad_check_probes<F>(
    f: F,
    inputs: &[Tensor],
    probes: &[(usize, usize)],
    step: f64,
) -> Result<f64>
where
    F: Fn(&mut GradientTape, &[Tensor]) -> Result<Tensor>,
{
    let mut tape = GradientTape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let y = f(&mut tape, &leaves)?;
    if y.len() != 1 {
        return Err(CoreError::InvalidArgument(alloc::format!(
            "grad_check_probes needs a scalar function, got shape {:?}",
            y.shape()
        )));
    }
    let grads = tape.backward(&y)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = GradientTape::new();
        let leaves: Vec<Tensor> = xs.iter().map(|t| tape.leaf(t, true)).collect();
        f(&mut tape, &leaves)?.item()
    };

    let mut worst = 0.0f64;
    for &(ti, ci) in probes {
        let perturb = |delta: f64| -> Result<Vec<Tensor>> {
            let mut xs: Vec<Tensor> = inputs.to_vec();
            let mut vals = xs[ti].values().to_vec();
            vals[ci] += delta;
            xs[ti] = Tensor::new(inputs[ti].shape(), vals)?;
            Ok(xs)
        };
        let fp = eval(&perturb(step)?)?;
        let fm = eval(&perturb(-step)?)?;
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max(rel_err(analytic[ti].values()[ci], fd));
    }
    Ok(worst)
}

/// Name and worst observed relative error of one checked operation.
#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rand_tensor(shape: &[usize], rng: &mut crate::rng::RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("finite")
}

/// Tensor with entries bounded away from zero (for relu kinks and
/// division).
fn rand_tensor_away_from_zero(shape: &[usize], rng: &mut crate::rng::RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let v = rng.normal();
                if crate::math::abs(v) < 0.1 {
                    0.1 + rng.uniform()
                } else {
                    v
                }
            })
            .collect(),
    )
    .expect("finite")
}

fn rand_positive(shape: &[usize], rng: &mut crate::rng::RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 0.2 + rng.uniform()).collect()).expect("finite")
}

/// Finite-difference verification of every differentiable tape operation
/// plus the composed DFDR layer, over `instances` random instances each
/// (f64, central differences with the given step).
///
/// The gradient-reversal layer is excluded: reversal makes its tape
/// gradient differ from the forward's finite difference by construction,
/// and its contract is verified exactly elsewhere.
pub fn standard_suite(seed: u64, instances: usize, step: f64) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    let mut rng = crate::rng::RngStream::new(seed);

    // helper running one named scalar-valued function over fresh inputs
    macro_rules! check {
        ($name:literal, $make:expr) => {{
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let err: f64 = $make(&mut rng)?;
                worst = worst.max(err);
            }
            results.push(GradCheckResult {
                name: $name,
                max_rel_err: worst,
            });
        }};
    }

    check!("add", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[3, 4], rng);
        let b = rand_tensor(&[4], rng);
        grad_check(
            move |tape, x| {
                let s = tape.add(x, &b)?;
                let sq = tape.mul(&s, &s)?;
                tape.sum_all(&sq)
            },
            &x,
            step,
        )
    });
    check!("sub", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[3, 4], rng);
        let b = rand_tensor(&[4], rng);
        grad_check(
            move |tape, x| {
                let s = tape.sub(x, &b)?;
                let sq = tape.mul(&s, &s)?;
                tape.sum_all(&sq)
            },
            &x,
            step,
        )
    });
    check!("mul", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[2, 3, 2, 2], rng);
        let b = rand_tensor(&[2, 3, 1, 1], rng);
        grad_check(
            move |tape, x| {
                let s = tape.mul(x, &b)?;
                tape.sum_all(&s)
            },
            &x,
            step,
        )
    });
    check!("div", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[3, 4], rng);
        let b = rand_tensor_away_from_zero(&[3, 4], rng);
        grad_check(
            move |tape, x| {
                let s = tape.div(x, &b)?;
                tape.sum_all(&s)
            },
            &x,
            step,
        )
    });
    check!("div_by_operand", |rng: &mut crate::rng::RngStream| {
        let a = rand_tensor(&[3, 4], rng);
        let x = rand_positive(&[4], rng);
        grad_check(
            move |tape, x| {
                let s = tape.div(&a, x)?;
                tape.sum_all(&s)
            },
            &x,
            step,
        )
    });
    check!("add_scalar/mul_scalar", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[5], rng);
        grad_check(
            |tape, x| {
                let a = tape.add_scalar(x, 0.7)?;
                let m = tape.mul_scalar(&a, -1.3)?;
                let sq = tape.mul(&m, &m)?;
                tape.sum_all(&sq)
            },
            &x,
            step,
        )
    });
    check!("sqrt", |rng: &mut crate::rng::RngStream| {
        let x = rand_positive(&[6], rng);
        grad_check(
            |tape, x| {
                let s = tape.sqrt(x)?;
                tape.sum_all(&s)
            },
            &x,
            step,
        )
    });
    check!("relu", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor_away_from_zero(&[8], rng);
        grad_check(
            |tape, x| {
                let r = tape.relu(x)?;
                let sq = tape.mul(&r, &r)?;
                tape.sum_all(&sq)
            },
            &x,
            step,
        )
    });
    check!("sigmoid", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[8], rng);
        grad_check(
            |tape, x| {
                let s = tape.sigmoid(x)?;
                tape.sum_all(&s)
            },
            &x,
            step,
        )
    });
    check!("softplus", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[8], rng);
        grad_check(
            |tape, x| {
                let s = tape.softplus(x)?;
                tape.sum_all(&s)
            },
            &x,
            step,
        )
    });
    check!("log_softmax", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[3, 5], rng);
        let w = rand_tensor(&[3, 5], rng);
        grad_check(
            move |tape, x| {
                let l = tape.log_softmax(x, 1)?;
                let p = tape.mul(&l, &w)?;
                tape.sum_all(&p)
            },
            &x,
            step,
        )
    });
    check!("softmax", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[3, 5], rng);
        let w = rand_tensor(&[3, 5], rng);
        grad_check(
            move |tape, x| {
                let s = tape.softmax(x, 1)?;
                let p = tape.mul(&s, &w)?;
                tape.sum_all(&p)
            },
            &x,
            step,
        )
    });
    check!("linear", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[3, 4], rng);
        let w = rand_tensor(&[4, 2], rng);
        let b = rand_tensor(&[2], rng);
        let probes: Vec<(usize, usize)> = (0..3).map(|i| (0, i * 3)).chain([(1, 2), (2, 1)]).collect();
        grad_check_probes(
            |tape, xs| {
                let y = tape.linear(&xs[0], &xs[1], &xs[2])?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            &[x, w, b],
            &probes,
            step,
        )
    });
    check!("conv2d", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[1, 2, 4, 4], rng);
        let k = rand_tensor(&[2, 2, 3, 3], rng);
        let b = rand_tensor(&[2], rng);
        let probes: Vec<(usize, usize)> =
            alloc::vec![(0, 0), (0, 17), (0, 31), (1, 0), (1, 9), (1, 35), (2, 0), (2, 1)];
        grad_check_probes(
            |tape, xs| {
                let y = tape.conv2d(&xs[0], &xs[1], &xs[2])?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            &[x, k, b],
            &probes,
            step,
        )
    });
    check!("mean", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[2, 3, 2, 2], rng);
        grad_check(
            |tape, x| {
                let m = tape.mean(x, &[2, 3], false)?;
                let sq = tape.mul(&m, &m)?;
                tape.sum_all(&sq)
            },
            &x,
            step,
        )
    });
    check!("var", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[2, 3, 2, 2], rng);
        grad_check(
            |tape, x| {
                let v = tape.var(x, &[2, 3], false)?;
                tape.sum_all(&v)
            },
            &x,
            step,
        )
    });
    check!("avg_pool2", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[1, 2, 4, 4], rng);
        grad_check(
            |tape, x| {
                let p = tape.avg_pool2(x)?;
                let sq = tape.mul(&p, &p)?;
                tape.sum_all(&sq)
            },
            &x,
            step,
        )
    });
    check!("upsample_nearest", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[1, 2, 2, 2], rng);
        grad_check(
            |tape, x| {
                let u = tape.upsample_nearest(x, 2)?;
                let sq = tape.mul(&u, &u)?;
                tape.sum_all(&sq)
            },
            &x,
            step,
        )
    });
    check!("reshape/stack_last2", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[2, 3], rng);
        let b = rand_tensor(&[2, 3], rng);
        grad_check(
            move |tape, x| {
                let q = tape.stack_last2(x, &b)?;
                let r = tape.reshape(&q, &[3, 4])?;
                let sq = tape.mul(&r, &r)?;
                tape.sum_all(&sq)
            },
            &x,
            step,
        )
    });
    check!("channel_linear2", |rng: &mut crate::rng::RngStream| {
        let q = rand_tensor(&[3, 4, 2], rng);
        let w = rand_tensor(&[4, 2], rng);
        grad_check_probes(
            |tape, xs| {
                let t = tape.channel_linear2(&xs[0], &xs[1])?;
                let sq = tape.mul(&t, &t)?;
                tape.sum_all(&sq)
            },
            &[q, w],
            &[(0, 0), (0, 7), (0, 23), (1, 0), (1, 5)],
            step,
        )
    });
    check!("pixel_linear", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[2, 3, 2, 2], rng);
        let w = rand_tensor(&[4, 3], rng);
        let b = rand_tensor(&[4], rng);
        grad_check_probes(
            |tape, xs| {
                let y = tape.pixel_linear(&xs[0], &xs[1], &xs[2])?;
                let sq = tape.mul(&y, &y)?;
                tape.sum_all(&sq)
            },
            &[x, w, b],
            &[(0, 0), (0, 11), (1, 0), (1, 7), (2, 2)],
            step,
        )
    });
    check!("cross_entropy_soft", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[4, 3], rng);
        let mut t = alloc::vec![0.0f64; 12];
        for row in t.chunks_exact_mut(3) {
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = 0.05 + rng.uniform();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let targets = Tensor::new(&[4, 3], t)?;
        grad_check(
            move |tape, x| tape.cross_entropy_soft(x, &targets),
            &x,
            step,
        )
    });
    check!("cross_entropy_pixels", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[2, 3, 2, 2], rng);
        let labels: Vec<u16> = (0..8).map(|_| rng.below(3) as u16).collect();
        grad_check(
            move |tape, x| tape.cross_entropy_pixels(x, &labels),
            &x,
            step,
        )
    });
    check!(
        "cross_entropy_pixels_coarse",
        |rng: &mut crate::rng::RngStream| {
            let x = rand_tensor(&[2, 3, 2, 2], rng);
            let labels: Vec<u16> = (0..32).map(|_| rng.below(3) as u16).collect();
            grad_check(
                move |tape, x| tape.cross_entropy_pixels_coarse(x, &labels, 2),
                &x,
                step,
            )
        }
    );
    check!("prediction_entropy", |rng: &mut crate::rng::RngStream| {
        // checked through softmax so perturbed inputs stay distributions
        let x = rand_tensor(&[3, 4], rng);
        grad_check(
            |tape, x| {
                let p = tape.softmax(x, 1)?;
                tape.prediction_entropy(&p)
            },
            &x,
            step,
        )
    });
    check!("rbf_mmd2", |rng: &mut crate::rng::RngStream| {
        let x = rand_tensor(&[4, 3], rng);
        let y = rand_tensor(&[5, 3], rng);
        grad_check_probes(
            |tape, xs| tape.rbf_mmd2(&xs[0], &xs[1], 0.7),
            &[x, y],
            &[(0, 0), (0, 5), (0, 11), (1, 0), (1, 14)],
            step,
        )
    });
    check!("dfdr_layer", |rng: &mut crate::rng::RngStream| {
        let f = rand_tensor(&[3, 2, 2, 2], rng);
        let gamma = rand_tensor_away_from_zero(&[2], rng);
        let beta = rand_tensor(&[2], rng);
        let w = rand_tensor(&[2, 2], rng);
        grad_check_probes(
            |tape, xs| {
                let affine = crate::dfdr::AffineParams {
                    gamma: xs[1].clone(),
                    beta: xs[2].clone(),
                    epsilon: 1e-5,
                };
                let cra = crate::dfdr::CraParams {
                    w: xs[3].clone(),
                    bn_gamma: Tensor::full(&[2], 1.0)?,
                    bn_beta: Tensor::zeros(&[2]),
                    bn_momentum: crate::dfdr::DEFAULT_BN_MOMENTUM,
                    bn_epsilon: crate::dfdr::DEFAULT_BN_EPSILON,
                };
                let running = crate::dfdr::CraRunningStats::new(2);
                let (gain, side) = crate::dfdr::dfdr_layer_forward(
                    tape,
                    &xs[0],
                    &affine,
                    &cra,
                    &running,
                    crate::dfdr::CraMode::Train,
                )?;
                let side = side.expect("train side outputs");
                let g2 = tape.mul(&gain, &gain)?;
                let i2 = tape.mul(
                    &side.reassembled.interference,
                    &side.reassembled.interference,
                )?;
                let s1 = tape.sum_all(&g2)?;
                let s2 = tape.sum_all(&i2)?;
                tape.add(&s1, &s2)
            },
            &[f, gamma, beta, w],
            &[(0, 0), (0, 7), (0, 19), (1, 0), (1, 1), (2, 0), (3, 0), (3, 3)],
            step,
        )
    });

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::new(&[2], alloc::vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(&sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(&[3], alloc::vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |tape, x| {
                let z = tape.mul_scalar(x, 0.0)?;
                tape.sum_all(&z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn standard_suite_passes_tight_tolerance() {
        let results = standard_suite(2024, 5, 1e-5).unwrap();
        assert!(results.len() >= 20);
        for r in &results {
            assert!(
                r.max_rel_err < 1e-5,
                "{} has relative error {}",
                r.name,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn sigmoid_of_linear_gradient() {
        let x = Tensor::new(&[1, 3], alloc::vec![0.3, -0.8, 1.2]).unwrap();
        let w = Tensor::new(&[3, 1], alloc::vec![0.5, -0.2, 0.9]).unwrap();
        let b = Tensor::new(&[1], alloc::vec![0.1]).unwrap();
        let err = grad_check(
            move |tape, x| {
                let y = tape.linear(x, &w, &b)?;
                let s = tape.sigmoid(&y)?;
                tape.sum_all(&s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
