//! First-order optimizers over named parameter tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Update rule. Adam is the default used by the trainer; plain gradient
/// descent exists for tests and simple probes.
#[derive(Clone, Copy, Debug)]
pub enum Rule {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer with per-parameter state, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Optimizer<S: Scalar> {
    learning_rate: S,
    rule: Rule,
    step_count: u64,
    moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn sgd(learning_rate: S) -> Self {
        Optimizer { learning_rate, rule: Rule::Sgd, step_count: 0, moments: BTreeMap::new() }
    }

    pub fn adam(learning_rate: S) -> Self {
        Optimizer {
            learning_rate,
            rule: Rule::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> S {
        self.learning_rate
    }

    /// Apply one optimizer step to a set of named parameters. Parameters
    /// missing a gradient entry are left untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<S>)>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        self.step_count += 1;
        for (name, value) in params {
            let Some(grad) = grads.get(name) else { continue };
            if grad.shape() != value.shape() {
                return Err(Error::structure(format!(
                    "gradient shape {:?} does not match parameter `{name}` {:?}",
                    grad.shape(),
                    value.shape()
                )));
            }
            match self.rule {
                Rule::Sgd => {
                    value.axpy(-self.learning_rate, grad)?;
                }
                Rule::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
                    let t = S::of(self.step_count as f64);
                    let bias1 = S::one() - b1.powf(t);
                    let bias2 = S::one() - b2.powf(t);
                    for ((p, (mi, vi)), &g) in value
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                        .zip(grad.data())
                    {
                        *mi = b1 * *mi + (S::one() - b1) * g;
                        *vi = b2 * *vi + (S::one() - b2) * g * g;
                        let m_hat = *mi / bias1;
                        let v_hat = *vi / bias2;
                        *p = *p - self.learning_rate * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
