//! Named parameters, the parameter registry, and SGD with momentum.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{GradientTape, Gradients, Tensor};

/// A trainable tensor with a unique dotted-path name and its SGD momentum
/// buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub momentum: Vec<f64>,
}

/// Stable handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Registry of all trainable parameters of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    /// Register a parameter. Names must be unique within the set.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(CoreError::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let momentum = vec![0.0; value.len()];
        self.params.push(Parameter {
            name: String::from(name),
            value,
            momentum,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Replace a parameter's value (used by checkpoint loading). Shape must
    /// match exactly.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| CoreError::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "parameter {name:?}: stored {:?}, loading {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value.detach();
        Ok(())
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every parameter as a requires-grad leaf on `tape`.
    pub fn bind(&self, tape: &mut GradientTape) -> ParamBinding {
        ParamBinding {
            leaves: self.params.iter().map(|p| tape.leaf(&p.value, true)).collect(),
        }
    }

    /// Gradient map by parameter name. Parameters unreachable from the loss
    /// get zero gradients.
    pub fn gradient_map(&self, binding: &ParamBinding, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .zip(&binding.leaves)
            .map(|(p, leaf)| (p.name.clone(), grads.get_or_zeros(leaf)))
            .collect()
    }
}

/// Per-step leaf tensors of a bound [`ParamSet`] on the active tape.
pub struct ParamBinding {
    leaves: Vec<Tensor>,
}

impl ParamBinding {
    pub fn leaf(&self, id: ParamId) -> &Tensor {
        &self.leaves[id.0]
    }

    /// Assemble a binding from explicit leaves, in registration order.
    pub fn from_leaves(leaves: Vec<Tensor>) -> Self {
        ParamBinding { leaves }
    }
}

/// One SGD step with classical momentum: v ← momentum·v + g; p ← p − lr·v.
///
/// `grads` must contain an entry for every parameter in the set.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(CoreError::InvalidArgument(format!("learning rate {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(CoreError::InvalidArgument(format!("momentum {momentum}")));
    }
    for p in params.params.iter() {
        if !grads.contains_key(&p.name) {
            return Err(CoreError::InvalidArgument(format!(
                "gradient map is missing {:?}",
                p.name
            )));
        }
    }
    for p in params.params.iter_mut() {
        let g = &grads[&p.name];
        if g.shape() != p.value.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "gradient for {:?}: {:?} vs {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        let mut new_vals = p.value.values().to_vec();
        for ((v, m), &gi) in new_vals.iter_mut().zip(p.momentum.iter_mut()).zip(g.values()) {
            *m = momentum * *m + gi;
            *v -= lr * *m;
        }
        p.value = Tensor::new(p.value.shape(), new_vals)?;
    }
    Ok(())
}
