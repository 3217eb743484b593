//! Adam with decoupled weight decay.

use crate::embed::{ModelParams, PRIMITIVE_TENSORS, TENSOR_NAMES};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Apply weight decay to the primitive embedding table as well.
    pub decay_primitives: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_params(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One Adam update of `params` from per-tensor gradients ordered like
    /// [`ModelParams::tensors`].
    pub fn step(&mut self, params: &mut ModelParams, grads: &[&[f64]], cfg: &AdamConfig) -> Result<()> {
        let mut tensors = params.tensors_mut();
        if grads.len() != tensors.len() || self.first.len() != tensors.len() {
            return Err(Error::ShapeMismatch("gradient tensor count".into()));
        }
        for (i, (p, g)) in tensors.iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.first[i].len() != p.len() {
                return Err(Error::ShapeMismatch(TENSOR_NAMES[i].into()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = cfg.learning_rate;
        for (i, p) in tensors.iter_mut().enumerate() {
            let decay = if !cfg.decay_primitives && PRIMITIVE_TENSORS.contains(&i) {
                0.0
            } else {
                cfg.weight_decay
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &g)) in p.iter_mut().zip(grads[i]).enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}
