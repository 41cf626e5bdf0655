use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use super::PredictiveMoments;
use crate::error::{check_dim, DgpError, Result};

/// Per-observation likelihood `p(y | f)` for the Monte-Carlo estimator.
pub trait Likelihood {
    fn log_density(&self, y: f64, f: f64) -> f64;

    /// `∂ log p(y | f) / ∂θ` for the likelihood's (log-scale) parameter.
    fn d_log_param(&self, _y: f64, _f: f64) -> f64 {
        0.0
    }
}

impl<F: Fn(f64, f64) -> f64> Likelihood for F {
    fn log_density(&self, y: f64, f: f64) -> f64 {
        self(y, f)
    }
}

/// `N(y | f, σ²)` parametrized by `log σ²`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianLikelihood {
    pub log_noise: f64,
}

impl Likelihood for GaussianLikelihood {
    fn log_density(&self, y: f64, f: f64) -> f64 {
        let var = self.log_noise.exp();
        -0.5 * (2.0 * PI * var).ln() - (y - f) * (y - f) / (2.0 * var)
    }

    fn d_log_param(&self, y: f64, f: f64) -> f64 {
        let var = self.log_noise.exp();
        -0.5 + (y - f) * (y - f) / (2.0 * var)
    }
}

/// Derivatives of an expected log-likelihood with respect to the
/// predictive moments and the likelihood parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentGradient {
    pub d_mean: DVector<f64>,
    pub d_variance: DVector<f64>,
    pub d_log_noise: f64,
}

/// `Σ_n −½ log(2πσ²) − ((y_n − m̂_n)² + ŝ_n) / (2σ²)`.
pub fn ell_gaussian(moments: &PredictiveMoments, y: &DVector<f64>, log_noise: f64) -> Result<f64> {
    check_dim(moments.len(), y.len())?;
    let var = log_noise.exp();
    if !(var > 0.0) || !var.is_finite() {
        return Err(DgpError::InvalidArgument("noise variance must be positive".into()));
    }
    let c = -0.5 * (2.0 * PI * var).ln();
    Ok(moments
        .mean
        .iter()
        .zip(moments.variance.iter())
        .zip(y.iter())
        .map(|((m, s), y)| c - ((y - m) * (y - m) + s) / (2.0 * var))
        .sum())
}

/// Closed-form derivatives of `ell_gaussian`.
pub fn gaussian_moment_gradient(
    moments: &PredictiveMoments,
    y: &DVector<f64>,
    log_noise: f64,
) -> Result<MomentGradient> {
    check_dim(moments.len(), y.len())?;
    let var = log_noise.exp();
    let d_mean = DVector::from_fn(y.len(), |i, _| (y[i] - moments.mean[i]) / var);
    let d_variance = DVector::from_element(y.len(), -0.5 / var);
    let d_log_noise = (0..y.len())
        .map(|i| {
            let r = y[i] - moments.mean[i];
            -0.5 + (r * r + moments.variance[i]) / (2.0 * var)
        })
        .sum();
    Ok(MomentGradient {
        d_mean,
        d_variance,
        d_log_noise,
    })
}

/// Monte-Carlo estimate of the expected log-likelihood and its
/// score-function gradients, with standard errors of every estimate.
#[derive(Clone, Debug)]
pub struct MonteCarloEll {
    pub value: f64,
    pub value_se: f64,
    pub d_mean: DVector<f64>,
    pub d_mean_se: DVector<f64>,
    pub d_variance: DVector<f64>,
    pub d_variance_se: DVector<f64>,
    pub d_log_param: f64,
}

impl MonteCarloEll {
    pub fn moment_gradient(&self) -> MomentGradient {
        MomentGradient {
            d_mean: self.d_mean.clone(),
            d_variance: self.d_variance.clone(),
            d_log_noise: self.d_log_param,
        }
    }
}

/// For `f ~ N(m̂, ŝ)` and `ε = (f − m̂)/√ŝ`,
///
/// ```text
/// ∇_m̂ E[log p] = E[ε/√ŝ · log p]
/// ∇_ŝ E[log p] = E[(ε² − 1)/(2ŝ) · log p]
/// ```
pub fn ell_monte_carlo<L: Likelihood + ?Sized, R: Rng + ?Sized>(
    moments: &PredictiveMoments,
    y: &DVector<f64>,
    likelihood: &L,
    n_samples: usize,
    rng: &mut R,
) -> Result<MonteCarloEll> {
    check_dim(moments.len(), y.len())?;
    if n_samples == 0 {
        return Err(DgpError::InvalidArgument("n_samples must be at least 1".into()));
    }
    let n = y.len();
    let ns = n_samples as f64;
    let mut out = MonteCarloEll {
        value: 0.0,
        value_se: 0.0,
        d_mean: DVector::zeros(n),
        d_mean_se: DVector::zeros(n),
        d_variance: DVector::zeros(n),
        d_variance_se: DVector::zeros(n),
        d_log_param: 0.0,
    };
    let mut value_var = 0.0;
    for i in 0..n {
        let (m, s) = (moments.mean[i], moments.variance[i]);
        if !(s > 0.0) {
            return Err(DgpError::InvalidArgument(format!(
                "predictive variance at {i} must be positive"
            )));
        }
        let sd = s.sqrt();
        let mut acc = [Welford::default(), Welford::default(), Welford::default()];
        let mut theta = 0.0;
        for _ in 0..n_samples {
            let eps: f64 = rng.sample(StandardNormal);
            let f = m + sd * eps;
            let lp = likelihood.log_density(y[i], f);
            if !lp.is_finite() {
                return Err(DgpError::NonFinite(format!("log-likelihood at observation {i}")));
            }
            acc[0].push(lp);
            acc[1].push(eps / sd * lp);
            acc[2].push((eps * eps - 1.0) / (2.0 * s) * lp);
            theta += likelihood.d_log_param(y[i], f);
        }
        out.value += acc[0].mean;
        value_var += acc[0].variance() / ns;
        out.d_mean[i] = acc[1].mean;
        out.d_mean_se[i] = (acc[1].variance() / ns).sqrt();
        out.d_variance[i] = acc[2].mean;
        out.d_variance_se[i] = (acc[2].variance() / ns).sqrt();
        out.d_log_param += theta / ns;
    }
    out.value_se = value_var.sqrt();
    Ok(out)
}

#[derive(Default, Clone, Copy)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n > 1.0 {
            self.m2 / (self.n - 1.0)
        } else {
            0.0
        }
    }
}
