use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tape::Gradients;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Named trainable tensors with per-parameter Adam state.
///
/// Iteration order is by name, which keeps checkpoints and
/// gradient checks reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let len = value.len();
        self.slots.insert(
            name,
            Slot {
                value,
                m: vec![0.0; len],
                v: vec![0.0; len],
                step: 0,
            },
        );
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    /// Replaces a parameter's value, keeping its optimizer state.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(TensorError::Dimension {
                op: "set_value",
                left: slot.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.slots.get(name).map(|s| s.step)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k, &s.value))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// One Adam update for every parameter that has a gradient.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let slot = self
                .slots
                .get(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if slot.value.shape() != g.shape() {
                return Err(TensorError::Dimension {
                    op: "adam_step",
                    left: slot.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        for (name, g) in grads.iter() {
            let slot = self.slots.get_mut(name).expect("checked above");
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - ADAM_BETA1.powi(t);
            let bc2 = 1.0 - ADAM_BETA2.powi(t);
            let mut data = slot.value.data().to_vec();
            for (i, gi) in g.data().iter().enumerate() {
                slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * gi;
                slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            slot.value = Tensor::new(slot.value.shape().to_vec(), data)?;
        }
        Ok(())
    }
}
