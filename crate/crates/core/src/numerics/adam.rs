use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam moments for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place and increments the step counter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
