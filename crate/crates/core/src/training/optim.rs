//! ADAM, global-norm clipping and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::engine::Gradients;
use crate::error::{HyprError, Result};
use crate::network::Network;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(HyprError::config("adam needs 0 <= beta < 1 and eps > 0"));
        }
        Ok(())
    }
}

/// Bias-corrected ADAM moments shaped like the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Network<T>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = net
            .layers
            .iter()
            .map(|l| vec![T::zero(); l.w.len()])
            .collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn update(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.len() != l.w.len())
        {
            return Err(HyprError::dim("gradient does not match the network"));
        }
        self.step += 1;
        let (b1, b2) = (T::c(self.cfg.beta1), T::c(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.step as i32);
        let c2 = T::one() - b2.powi(self.step as i32);
        let (lr, eps) = (T::c(lr), T::c(self.cfg.eps));
        for (l, layer) in net.layers.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[l], &mut self.v[l]);
            for (((w, &g), mi), vi) in layer
                .w
                .iter_mut()
                .zip(&grads.layers[l])
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `g` to norm `max_norm` when its global L2 norm exceeds it.
/// Returns the norm before clipping. `None` disables clipping.
pub fn clip_gradient<T: Scalar>(g: &mut Gradients<T>, max_norm: Option<f64>) -> T {
    let norm = g.norm();
    if let Some(mx) = max_norm {
        let mx = T::c(mx);
        if norm > mx {
            g.scale(mx / norm);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Linear,
    Cosine,
}

/// Learning rate for 0-based `epoch` out of `total`.
pub fn lr_schedule(schedule: Schedule, init: f64, epoch: usize, total: usize) -> f64 {
    let frac = if total == 0 {
        0.0
    } else {
        epoch as f64 / total as f64
    };
    match schedule {
        Schedule::Constant => init,
        Schedule::Linear => init * (1.0 - frac).max(0.0),
        Schedule::Cosine => init * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos()),
    }
}
