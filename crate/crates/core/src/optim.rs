//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

/// Optimizer state for a fixed parameter set. Moment buffers exist for
/// exactly the names registered at construction; `step` increases by one
/// per update.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<'a>(
        config: AdamConfig,
        params: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>,
    ) -> Self
    where
        T: 'a,
    {
        let slots = params
            .into_iter()
            .map(|(name, tensor)| {
                let n = tensor.numel();
                (
                    name.clone(),
                    Slot {
                        first_moment: vec![T::ZERO; n],
                        second_moment: vec![T::ZERO; n],
                    },
                )
            })
            .collect();
        Adam {
            config,
            step: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// One bias-corrected update. Every registered parameter must have a
    /// gradient; gradients are left untouched (the caller discards the graph
    /// that owns them).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = T::from_f64(self.config.learning_rate);
        let beta1 = T::from_f64(self.config.beta1);
        let beta2 = T::from_f64(self.config.beta2);
        let eps = T::from_f64(self.config.epsilon);
        let one = T::ONE;
        let bias1 = one - beta1.powi(t);
        let bias2 = one - beta2.powi(t);

        for (name, slot) in self.slots.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if grad.len() != param.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "gradient for `{}` has {} elements, parameter has {}",
                        name,
                        grad.len(),
                        param.numel()
                    ),
                ));
            }
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                slot.first_moment[i] = beta1 * slot.first_moment[i] + (one - beta1) * g;
                slot.second_moment[i] = beta2 * slot.second_moment[i] + (one - beta2) * g * g;
                let m_hat = slot.first_moment[i] / bias1;
                let v_hat = slot.second_moment[i] / bias2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers, keyed by parameter name, for checkpointing.
    pub fn export_moments(&self) -> BTreeMap<String, (Vec<T>, Vec<T>)> {
        self.slots
            .iter()
            .map(|(name, slot)| {
                (
                    name.clone(),
                    (slot.first_moment.clone(), slot.second_moment.clone()),
                )
            })
            .collect()
    }

    /// Restores moment buffers and the step counter from a checkpoint.
    pub fn import_moments(
        &mut self,
        step: u64,
        moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    ) -> Result<()> {
        for (name, (m, v)) in moments {
            let slot = self
                .slots
                .get_mut(&name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if m.len() != slot.first_moment.len() || v.len() != slot.second_moment.len() {
                return Err(Error::shape(
                    "adam_import",
                    format!("moment size mismatch for `{}`", name),
                ));
            }
            slot.first_moment = m;
            slot.second_moment = v;
        }
        self.step = step;
        Ok(())
    }
}
