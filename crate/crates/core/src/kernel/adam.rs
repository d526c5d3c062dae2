use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Moment>,
}

/// First and second moment accumulators of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moment {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Rebuilds a state from persisted parts.
    pub fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        moments: Vec<Moment>,
    ) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moment] {
        &self.moments
    }

    /// Applies one update to every parameter using its stored gradient.
    ///
    /// Parameters must be passed in the same order on every call. Nothing is
    /// modified if any gradient contains a NaN.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = p.grad() {
                if g.len() != p.len() {
                    return Err(Error::Shape {
                        op: "adam_step",
                        left: p.shape().to_vec(),
                        right: vec![g.len()],
                    });
                }
                if g.iter().any(|v| v.is_nan()) {
                    return Err(Error::NonFinite(format!("gradient of parameter `{name}`")));
                }
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(name, p)| Moment {
                    name: String::from(*name),
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for ((name, p), moment) in params.iter_mut().zip(self.moments.iter_mut()) {
            if moment.m.len() != p.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![moment.m.len()],
                });
            }
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.len()],
            };
            debug_assert_eq!(*name, moment.name);
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                moment.m[i] = self.beta1 * moment.m[i] + (1.0 - self.beta1) * g;
                moment.v[i] = self.beta2 * moment.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = moment.m[i] / bc1;
                let v_hat = moment.v[i] / bc2;
                data[i] -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}
