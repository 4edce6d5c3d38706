//! Adaptive moment estimation with host-side state, so the moments can be
//! checkpointed and restored exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::ops::host;
use super::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `store` that has a gradient.
    ///
    /// `grad_scale` multiplies each gradient first (used for norm clipping).
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
        let scale = grad_scale as f32;
        for (name, var) in store.params() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = host(grad)?;
            let mut p = host(var.as_tensor())?;
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; p.len()],
                second: vec![0.0; p.len()],
            });
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m.first[i] = b1 * m.first[i] + (1.0 - b1) * gi;
                m.second[i] = b2 * m.second[i] + (1.0 - b2) * gi * gi;
                let denom = m.second[i].sqrt() / bc2_sqrt + eps;
                p[i] -= step_size * m.first[i] / denom;
            }
            var.set(&Tensor::from_vec(p, var.shape(), &Device::Cpu)?)?;
        }
        Ok(())
    }
}

/// L2 norm of all gradients belonging to the given stores.
pub fn grad_norm<'a>(stores: impl IntoIterator<Item = &'a ParamStore>, grads: &GradStore) -> Result<f64> {
    let mut sq = 0f64;
    for store in stores {
        for (_, var) in store.params() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += host(g)?.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
            }
        }
    }
    Ok(sq.sqrt())
}

/// Multiplier that brings a gradient of norm `norm` down to at most `max_norm`.
pub fn clip_scale(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(max) if norm > max => max / (norm + 1e-6),
        _ => 1.0,
    }
}
