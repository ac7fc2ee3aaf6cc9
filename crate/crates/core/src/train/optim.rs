use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OptimizerState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            state: OptimizerState {
                step: 0,
                first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            },
        }
    }

    /// One update of every parameter. Weight decay shrinks the parameter
    /// before the bias-corrected adaptive step and does not enter the moments.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        names: &[&str],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.state.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if params[i].len() != g.len() || self.state.first[i].len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has the wrong size",
                    names[i]
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {}",
                    names[i]
                )));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamWConfig {
            weight_decay,
            betas: (b1, b2),
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.state.first[i], &mut self.state.second[i]);
            for (k, theta) in p.iter_mut().enumerate() {
                let g = grads[i][k];
                *theta -= lr * weight_decay * *theta;
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for buf in self
            .state
            .first
            .iter_mut()
            .chain(self.state.second.iter_mut())
        {
            buf.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

/// Cosine-annealed learning rate for `epoch` in `0..=epochs`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64, eta_min: f64) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * epoch as f64 / epochs as f64;
    eta_min + (lr0 - eta_min) * (1.0 + phase.cos()) / 2.0
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy with probabilities clamped to
/// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn bce_loss(p: &[f64], y: &[u8]) -> f64 {
    let labels: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    crate::autodiff::bce_value(p, &labels, PROB_CLAMP)
}
