//! Adam with the conventional constants.

use crate::error::{Error, Result};
use crate::nn::Param;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one block per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Param>,
    v: Vec<Param>,
}

impl Adam {
    pub fn new(params: &[&Param]) -> Self {
        let zeros = |p: &&Param| Param::zeros(p.name.clone(), p.shape.clone());
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Restores saved state; block order must match the parameter order.
    pub fn from_state(step: u64, m: Vec<Param>, v: Vec<Param>) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Param] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Param] {
        &self.v
    }

    /// One bias-corrected update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(self.m.len(), (params.len(), grads.len())));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.data.len() != m.data.len() || g.len() != m.data.len() {
                return Err(Error::shape(&m.shape, (&p.shape, g.len())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                let mi = self.beta1 * m.data[i] + (1.0 - self.beta1) * g[i];
                let vi = self.beta2 * v.data[i] + (1.0 - self.beta2) * g[i] * g[i];
                m.data[i] = mi;
                v.data[i] = vi;
                p.data[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
