use super::model::{Grads, ModelParams};
use super::tensor::Tensor;
use crate::Scalar;

/// ADAM hyperparameters. Defaults: step 1e-3, beta1 0.9, beta2 0.999, eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First/second-moment estimates per trainable tensor plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
    cfg: AdamConfig,
}

impl<F: Scalar> AdamState<F> {
    /// Zero-initialized moments shaped after the model's trainable tensors.
    pub fn new(model: &ModelParams<F>, cfg: AdamConfig) -> Self {
        let m: Vec<Tensor<F>> = model
            .visit_trainable()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let v = m.clone();
        Self { m, v, t: 0, cfg }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update:
    /// `w -= lr * m_hat / (sqrt(v_hat) + eps)`, with `t` incremented by one.
    pub fn step(&mut self, model: &mut ModelParams<F>, grads: &Grads<F>) {
        self.t += 1;
        let b1 = F::of(self.cfg.beta1);
        let b2 = F::of(self.cfg.beta2);
        let one_b1 = F::of(1.0 - self.cfg.beta1);
        let one_b2 = F::of(1.0 - self.cfg.beta2);
        let corr1 = F::of(1.0 / (1.0 - self.cfg.beta1.powi(self.t as i32)));
        let corr2 = F::of(1.0 / (1.0 - self.cfg.beta2.powi(self.t as i32)));
        let lr = F::of(self.cfg.lr);
        let eps = F::of(self.cfg.eps);
        for ((param, grad), (m, v)) in model
            .visit_trainable_mut()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pw = param.data_mut();
            let gd = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pw.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + one_b1 * g;
                vd[i] = b2 * vd[i] + one_b2 * g * g;
                let m_hat = md[i] * corr1;
                let v_hat = vd[i] * corr2;
                pw[i] = pw[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
