use super::params::check_same_shapes;
use super::{Parameters, Tensor};
use crate::error::Result;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, params: &Parameters) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn halve_lr(&mut self) {
        self.lr *= 0.5;
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &[Tensor]) -> Result<()> {
        check_same_shapes(params, grads, "gradient")?;
        check_same_shapes(params, &self.first, "moment")?;
        self.step += 1;
        let t = self.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Step schedule: the rate halves after every `every` epochs.
pub fn halved_lr(base: f64, epoch: usize, every: usize) -> f64 {
    base * 0.5f64.powi((epoch / every.max(1)) as i32)
}
