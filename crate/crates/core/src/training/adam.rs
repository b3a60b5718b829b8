use log::warn;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Adam with the external rate α_i = α₀/√i.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub base_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(base_rate: f64, params: &[Tensor]) -> Result<Self> {
        if !(base_rate > 0.0 && base_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Ok(Self {
            base_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Number of accepted updates so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// α_i for the 1-based update index `i`.
    pub fn rate(&self, i: usize) -> f64 {
        self.base_rate / (i.max(1) as f64).sqrt()
    }

    /// Apply one update and return the rate used. A non-finite gradient leaves
    /// parameters and moments untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid("optimizer, parameter and gradient counts differ"));
        }
        for (k, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::invalid(format!("shape mismatch for variable {k}")));
            }
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            warn!("skipping update {}: non-finite gradient for variable {k}", self.step + 1);
            return Err(Error::invalid(format!("non-finite gradient for variable {k}")));
        }
        self.step += 1;
        let i = self.step;
        let rate = self.rate(i);
        let c1 = 1.0 - self.beta1.powi(i as i32);
        let c2 = 1.0 - self.beta2.powi(i as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (j, &gj) in gd.iter().enumerate() {
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                pd[j] -= rate * (mj / c1) / ((vj / c2).sqrt() + self.eps);
            }
        }
        Ok(rate)
    }
}
