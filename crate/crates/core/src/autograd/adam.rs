use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction over every parameter of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.value(id).len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidParameter(format!("learning rate must be > 0, got {lr}")));
        }
        let shapes_match = self.m.len() == params.len()
            && params.ids().all(|id| self.m[id.index()].len() == params.value(id).len());
        if !shapes_match {
            return Err(Error::Contract(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = params.grad(id).to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.value_mut(id).data_mut();
            for k in 0..w.len() {
                let g = grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
