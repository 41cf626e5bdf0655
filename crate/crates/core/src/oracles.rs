//! Independent dense reference implementations used to certify the
//! decoupled model: exact GP regression, the dense Gaussian KL, kernel
//! ridge regression, an explicit finite-dimensional feature kernel and a
//! central finite-difference gradient.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, check_finite, DgpError, Result};
use crate::kernels::{kernel_block, BasisPoint, KernelHyper, Points};
use crate::model::{Covariance, PredictiveMoments};

/// Dense oracles refuse larger problems.
pub const MAX_DENSE: usize = 4096;

const JITTER: f64 = 1e-8;

fn check_size(n: usize) -> Result<()> {
    if n > MAX_DENSE {
        return Err(DgpError::InvalidArgument(format!(
            "dense oracle limited to {MAX_DENSE} points, got {n}"
        )));
    }
    Ok(())
}

/// Cholesky of a symmetric matrix; on failure retries once with
/// `1e-8 · mean(diag)` added to the diagonal.
fn factor(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let scale = if n > 0 { m.trace() / n as f64 } else { 1.0 };
    let mut jittered = m;
    for i in 0..n {
        jittered[(i, i)] += JITTER * scale.abs().max(f64::MIN_POSITIVE);
    }
    Cholesky::new(jittered).ok_or_else(|| DgpError::Factorization(what.to_string()))
}

fn log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn prior_matrix(x: &DMatrix<f64>, hyper: &KernelHyper) -> Result<DMatrix<f64>> {
    Ok(kernel_block(Points::Inputs(x), Points::Inputs(x), hyper, &[])?.values)
}

fn noisy_factor(x: &DMatrix<f64>, hyper: &KernelHyper, noise: f64) -> Result<Cholesky<f64, Dyn>> {
    let mut k = prior_matrix(x, hyper)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    factor(k, "K_X + σ²I")
}

/// Exact GP regression posterior moments:
/// `k_{x,X}(K_X + σ²I)⁻¹y` and `k(x,x) − k_{x,X}(K_X + σ²I)⁻¹k_{X,x}`.
pub fn exact_gpr(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &KernelHyper,
    log_noise: f64,
    queries: &DMatrix<f64>,
) -> Result<PredictiveMoments> {
    check_size(x.nrows())?;
    check_dim(x.nrows(), y.len())?;
    let chol = noisy_factor(x, hyper, log_noise.exp())?;
    let k_qx = kernel_block(Points::Inputs(queries), Points::Inputs(x), hyper, &[])?.values;
    let mean = &k_qx * chol.solve(y);
    let v = chol.l().solve_lower_triangular(&k_qx.transpose()).ok_or_else(|| {
        DgpError::Factorization("triangular solve in exact GPR".into())
    })?;
    let rho2 = (2.0 * hyper.log_amplitude).exp();
    let variance = DVector::from_fn(queries.nrows(), |i, _| rho2 - v.column(i).norm_squared());
    Ok(PredictiveMoments { mean, variance })
}

/// `log N(y | 0, K_X + σ²I)`.
pub fn log_marginal(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &KernelHyper, log_noise: f64) -> Result<f64> {
    check_size(x.nrows())?;
    check_dim(x.nrows(), y.len())?;
    let chol = noisy_factor(x, hyper, log_noise.exp())?;
    let n = y.len() as f64;
    Ok(-0.5 * y.dot(&chol.solve(y)) - 0.5 * log_det(&chol) - 0.5 * n * (2.0 * PI).ln())
}

/// `KL(N(μ_q, Σ_q) ‖ N(μ_p, Σ_p))` by dense factorization.
pub fn dense_gaussian_kl(
    mu_q: &DVector<f64>,
    sigma_q: &DMatrix<f64>,
    mu_p: &DVector<f64>,
    sigma_p: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_q.len();
    check_dim(d, mu_p.len())?;
    check_dim(d, sigma_q.nrows())?;
    check_dim(d, sigma_p.nrows())?;
    let cq = Cholesky::new(sigma_q.clone()).ok_or_else(|| DgpError::Factorization("Σ_q".into()))?;
    let cp = Cholesky::new(sigma_p.clone()).ok_or_else(|| DgpError::Factorization("Σ_p".into()))?;
    let diff = mu_q - mu_p;
    let trace = cp.solve(sigma_q).trace();
    let quad = diff.dot(&cp.solve(&diff));
    Ok(0.5 * (trace + quad + log_det(&cp) - log_det(&cq) - d as f64))
}

/// `(K_X + ridge·I)⁻¹ y`.
pub fn kernel_ridge(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &KernelHyper, ridge: f64) -> Result<DVector<f64>> {
    check_size(x.nrows())?;
    check_dim(x.nrows(), y.len())?;
    if !(ridge >= 0.0) {
        return Err(DgpError::InvalidArgument("ridge must be non-negative".into()));
    }
    Ok(noisy_factor(x, hyper, ridge)?.solve(y))
}

/// Central differences with `h = 1e-5 · (1 + |θ_i|)`.
pub fn finite_difference<F>(f: F, params: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        let h = 1e-5 * (1.0 + orig.abs());
        p[i] = orig + h;
        let up = f(&p)?;
        p[i] = orig - h;
        let down = f(&p)?;
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(DgpError::NonFinite(format!("objective near parameter {i}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Evaluate the coupled sparse posterior from its canonical statistics:
/// `m̂ = k_{x,Z} K_Z⁻¹ m̃`, `ŝ = k(x,x) + k_{x,Z} K_Z⁻¹ (S̃ − K_Z) K_Z⁻¹ k_{Z,x}`.
pub fn canonical_predict(
    m_tilde: &DVector<f64>,
    s_tilde: &DMatrix<f64>,
    basis: &[BasisPoint],
    hyper: &KernelHyper,
    queries: &DMatrix<f64>,
) -> Result<PredictiveMoments> {
    let k_z = hyper.basis_block(basis, basis)?;
    let k_xz = hyper.cross_block(queries, basis)?;
    let chol = factor(k_z.clone(), "K_Z")?;
    let mean = &k_xz * chol.solve(m_tilde);
    let a = chol.solve(&k_xz.transpose());
    let mid = s_tilde - &k_z;
    let prior = hyper.prior_diag(queries)?;
    let variance = DVector::from_fn(queries.nrows(), |i, _| {
        let col = a.column(i);
        prior[i] + col.dot(&(&mid * col))
    });
    Ok(PredictiveMoments { mean, variance })
}

/// Finite-dimensional kernel `k(x, x') = φ(x)ᵀφ(x')` with fixed random
/// cosine features `φ_k(x) = √(2/d) cos(w_kᵀx + b_k)`.
///
/// Basis points map to `φ(location)`; their multipliers are ignored.
#[derive(Clone, Debug)]
pub struct FeatureKernel {
    pub weights: DMatrix<f64>,
    pub offsets: DVector<f64>,
    pub seed: u64,
}

impl FeatureKernel {
    pub fn new(input_dim: usize, n_features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = DMatrix::from_fn(n_features, input_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let offsets = DVector::from_fn(n_features, |_, _| rng.random_range(0.0..2.0 * PI));
        Self { weights, offsets, seed }
    }

    pub fn n_features(&self) -> usize {
        self.offsets.len()
    }

    pub fn features(&self, x: &[f64]) -> DVector<f64> {
        let d = self.n_features();
        let scale = (2.0 / d as f64).sqrt();
        let x = DVector::from_column_slice(x);
        let z = &self.weights * x + &self.offsets;
        z.map(|v| scale * v.cos())
    }

    /// `d × M` matrix whose columns are the basis features.
    pub fn basis_features(&self, basis: &[BasisPoint]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_features(), basis.len());
        for (j, b) in basis.iter().enumerate() {
            out.set_column(j, &self.features(&b.location));
        }
        out
    }

    /// Dense mean and covariance of `N(Φ_α a, (I + Φ_β B Φ_βᵀ)⁻¹)`.
    pub fn dense_measure(
        &self,
        alpha: &[BasisPoint],
        a: &DVector<f64>,
        beta: &[BasisPoint],
        l: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.n_features();
        let mu = if alpha.is_empty() {
            DVector::zeros(d)
        } else {
            self.basis_features(alpha) * a
        };
        let mut prec = DMatrix::identity(d, d);
        if !beta.is_empty() {
            let pb = self.basis_features(beta) * l;
            prec += &pb * pb.transpose();
        }
        let sigma = Cholesky::new(prec)
            .ok_or_else(|| DgpError::Factorization("dense precision".into()))?
            .inverse();
        Ok((mu, sigma))
    }
}

impl Covariance for FeatureKernel {
    fn basis_block(&self, rows: &[BasisPoint], cols: &[BasisPoint]) -> Result<DMatrix<f64>> {
        if rows.is_empty() || cols.is_empty() {
            return Ok(DMatrix::zeros(rows.len(), cols.len()));
        }
        Ok(self.basis_features(rows).tr_mul(&self.basis_features(cols)))
    }

    fn cross_block(&self, inputs: &DMatrix<f64>, basis: &[BasisPoint]) -> Result<DMatrix<f64>> {
        check_dim(self.weights.ncols(), inputs.ncols())?;
        check_finite(inputs.as_slice(), "inputs")?;
        let fb = self.basis_features(basis);
        let mut out = DMatrix::zeros(inputs.nrows(), basis.len());
        for i in 0..inputs.nrows() {
            let row: Vec<f64> = inputs.row(i).iter().copied().collect();
            let phi = self.features(&row);
            for j in 0..basis.len() {
                out[(i, j)] = phi.dot(&fb.column(j));
            }
        }
        Ok(out)
    }

    fn prior_diag(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_dim(self.weights.ncols(), inputs.ncols())?;
        Ok(DVector::from_fn(inputs.nrows(), |i, _| {
            let row: Vec<f64> = inputs.row(i).iter().copied().collect();
            self.features(&row).norm_squared()
        }))
    }
}
