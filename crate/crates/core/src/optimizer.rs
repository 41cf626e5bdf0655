//! Adam gradient ascent over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DgpError, Result};
use crate::model::ParamLayout;

/// `γ_t = γ₀ / (1 + 0.1 √t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub gamma0: f64,
}

impl StepSchedule {
    pub fn new(gamma0: f64) -> Result<Self> {
        if !(gamma0 > 0.0) || !gamma0.is_finite() {
            return Err(DgpError::InvalidArgument("gamma0 must be positive and finite".into()));
        }
        Ok(Self { gamma0 })
    }

    pub fn rate(&self, t: u64) -> f64 {
        self.gamma0 / (1.0 + 0.1 * (t as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    /// Entries are always `≥ 0`.
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected ascent step `θ += rate · m̂ / (√v̂ + ε)`.
    ///
    /// A non-finite gradient is rejected before any state changes.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], rate: f64) -> Result<()> {
        check_dim(self.len(), params.len())?;
        check_dim(self.len(), grad.len())?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(DgpError::NonFinite(format!("gradient entry {i}")));
        }
        if !rate.is_finite() {
            return Err(DgpError::NonFinite("step rate".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / c1;
            let v_hat = self.second_moment[i] / c2;
            params[i] += rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    /// Re-index the moments after the model grows from `from` to `to`.
    /// New parameters start with zero moments; the step count is kept.
    pub fn remap(&mut self, from: &ParamLayout, to: &ParamLayout) -> Result<()> {
        self.first_moment = from.transfer(&self.first_moment, to)?;
        self.second_moment = from.transfer(&self.second_moment, to)?;
        Ok(())
    }
}
