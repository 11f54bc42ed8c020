//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! A [`Tensor`] is an immutable row-major value with a shape. Operations
//! live on [`GradientTape`]; a tensor produced by a tape op carries a node
//! reference so the backward pass can reach it. Tensors without a node are
//! constants and may be shared freely (the payload is behind an `Arc`).
//!
//! Feature maps follow the N×C×H×W convention.

pub(crate) mod kernels;
mod tape;

pub use tape::{GradientTape, Gradients, NodeId};

/// Benchmark-only access to the conv kernels (see examples/convbench.rs).
#[doc(hidden)]
pub mod kernels_bench {
    use super::kernels;
    use alloc::vec;

    pub fn bench_forward(n: usize, cin: usize, cout: usize, h: usize, w: usize) -> f64 {
        let x = vec![0.5f64; n * cin * h * w];
        let k = vec![0.01f64; cout * cin * 9];
        let bias = vec![0.1f64; cout];
        let y = kernels::conv2d_forward(&x, &k, &bias, n, cin, cout, h, w);
        y[0]
    }

    pub fn bench_backward(n: usize, cin: usize, cout: usize, h: usize, w: usize) -> f64 {
        let x = vec![0.5f64; n * cin * h * w];
        let k = vec![0.01f64; cout * cin * 9];
        let g = vec![0.3f64; n * cout * h * w];
        let gx = kernels::conv2d_backward_input(&g, &k, n, cin, cout, h, w);
        let (gk, gb) = kernels::conv2d_backward_kernel(&g, &x, n, cin, cout, h, w);
        gx[0] + gk[0] + gb[0]
    }
}

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Reference to a node on a specific tape instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TapeRef {
    pub tape_id: u64,
    pub node: NodeId,
}

/// Dense N-dimensional f64 array, optionally tracked on a gradient tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    requires_grad: bool,
    pub(crate) tape_ref: Option<TapeRef>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(values: &[f64], context: &str) -> Result<()> {
    // branchless exponent-mask scan: vectorizes, unlike an early-exit all()
    const EXP: u64 = 0x7ff0_0000_0000_0000;
    let mut bad = 0u64;
    for v in values {
        bad |= ((v.to_bits() & EXP) == EXP) as u64;
    }
    if bad == 0 {
        Ok(())
    } else {
        Err(CoreError::NonFinite(format!("in {context}")))
    }
}

impl Tensor {
    /// Constant tensor from raw values. Rejects shape/length disagreement
    /// and non-finite entries.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        if numel(shape) != values.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        check_finite(&values, "tensor construction")?;
        Ok(Tensor {
            shape: shape.to_vec(),
            values: Arc::new(values),
            requires_grad: false,
            tape_ref: None,
        })
    }

    /// Internal constructor for op outputs; values were already validated.
    pub(crate) fn from_parts(
        shape: Vec<usize>,
        values: Arc<Vec<f64>>,
        requires_grad: bool,
        tape_ref: Option<TapeRef>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            shape,
            values,
            requires_grad,
            tape_ref,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            values: Arc::new(alloc::vec![0.0; numel(shape)]),
            requires_grad: false,
            tape_ref: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Tensor::new(shape, alloc::vec![value; numel(shape)])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(&[], alloc::vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Identifier of this tensor's node on the tape it was recorded on,
    /// absent for constants.
    pub fn node_id(&self) -> Option<NodeId> {
        self.tape_ref.map(|r| r.node)
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() == 1 {
            Ok(self.values[0])
        } else {
            Err(CoreError::ShapeMismatch(format!(
                "item() on tensor of {} elements",
                self.values.len()
            )))
        }
    }

    /// Drop tape tracking, keeping the value.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            requires_grad: false,
            tape_ref: None,
        }
    }

    /// Maximum absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch(format!(
                "max_abs_diff {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| crate::math::abs(a - b))
            .fold(0.0, f64::max))
    }
}
