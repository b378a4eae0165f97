//! Bias-corrected Adam over named parameter tensors.
//!
//! State (first/second moments) is kept in the parameter dtype so
//! checkpoints round-trip bitwise; the update arithmetic runs in f64.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    params: Vec<(String, Tensor<T>)>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: Vec<(String, Tensor<T>)>, lr: f64) -> Self {
        Adam::with_hyperparams(params, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_hyperparams(
        params: Vec<(String, Tensor<T>)>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let m = params.iter().map(|(_, p)| vec![T::ZERO; p.len()]).collect();
        let v = params.iter().map(|(_, p)| vec![T::ZERO; p.len()]).collect();
        Adam { lr, beta1, beta2, eps, t: 0, params, m, v }
    }

    /// Completed steps (the bias-correction exponent).
    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update over all parameters, consuming the gradients currently
    /// stored on the tensors. A parameter with no gradient is treated as
    /// having gradient zero (its moments still decay).
    pub fn step(&mut self) -> Result<()> {
        for (name, p) in &self.params {
            if let Some(g) = p.grad_ref().as_deref() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter '{name}'"
                    )));
                }
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        for (i, (_, p)) in self.params.iter().enumerate() {
            let grad = p.grad_ref();
            let mut data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad.as_deref().map_or(0.0, |g| g[j].to_f64());
                let mj = self.beta1 * m[j].to_f64() + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j].to_f64() + (1.0 - self.beta2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                data[j] = T::from_f64(data[j].to_f64() - update);
            }
        }
        Ok(())
    }

    /// Moment slots for checkpointing: (parameter name, m, v, shape).
    pub fn slots(&self) -> impl Iterator<Item = (&str, &[T], &[T], &[usize])> {
        self.params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|((name, p), (m, v))| (name.as_str(), m.as_slice(), v.as_slice(), p.shape()))
    }

    /// Restore one parameter's moments (by name) from a checkpoint.
    pub fn load_slot(&mut self, name: &str, m: &[T], v: &[T]) -> Result<()> {
        let i = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter '{name}'")))?;
        if m.len() != self.m[i].len() || v.len() != self.v[i].len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state length mismatch for '{name}': expected {}, got {}/{}",
                self.m[i].len(),
                m.len(),
                v.len()
            )));
        }
        self.m[i].copy_from_slice(m);
        self.v[i].copy_from_slice(v);
        Ok(())
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }
}
