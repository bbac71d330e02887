//! Adam with a step-decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Param};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(base_lr: f64, decay_factor: f64, decay_interval: u64) -> Self {
        AdamState {
            base_lr,
            decay_factor,
            decay_interval: decay_interval.max(1),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// `base · factor^⌊step / interval⌋` for the update about to be applied.
    pub fn effective_lr(&self) -> f64 {
        let drops = self.step / self.decay_interval;
        self.base_lr * self.decay_factor.powi(drops.min(i32::MAX as u64) as i32)
    }

    /// Applies one update to every parameter.
    ///
    /// All gradients are validated before anything is touched, so a rejected
    /// step leaves both the parameters and the state unchanged.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &Gradients) -> Result<f64> {
        let collected: Vec<Tensor> = params.iter().map(|p| grads.param(p)).collect();
        for (p, g) in params.iter().zip(&collected) {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has shape {:?}, parameter has {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter `{}`",
                    p.name
                )));
            }
        }
        let lr = self.effective_lr();
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - BETA1.powf(t);
        let bias2 = 1.0 - BETA2.powf(t);
        for (p, g) in params.iter_mut().zip(&collected) {
            let shape = p.value.shape().to_vec();
            let entry = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    first: Tensor::zeros(&shape),
                    second: Tensor::zeros(&shape),
                });
            let gd = g.data();
            let first: Vec<f64> = entry
                .first
                .data()
                .iter()
                .zip(gd)
                .map(|(m, g)| BETA1 * m + (1.0 - BETA1) * g)
                .collect();
            let second: Vec<f64> = entry
                .second
                .data()
                .iter()
                .zip(gd)
                .map(|(v, g)| BETA2 * v + (1.0 - BETA2) * g * g)
                .collect();
            let updated: Vec<f64> = p
                .value
                .data()
                .iter()
                .zip(first.iter().zip(&second))
                .map(|(w, (m, v))| w - lr * (m / bias1) / ((v / bias2).sqrt() + EPSILON))
                .collect();
            entry.first = Tensor::from_parts(shape.clone(), first);
            entry.second = Tensor::from_parts(shape.clone(), second);
            p.value = Tensor::from_parts(shape, updated);
        }
        Ok(lr)
    }
}
