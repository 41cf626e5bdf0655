//! The decoupled variational posterior.
//!
//! The posterior mean lives in the span of `M_α` basis functions with
//! coefficients `a`; the posterior covariance operator is
//! `(I + Ψ_β B Ψ_βᵀ)⁻¹` over a separate set of `M_β` basis functions, with
//! `B = L Lᵀ`. Predictions are
//!
//! ```text
//! m̂(x) = k_{x,α} a
//! ŝ(x) = k(x, x) − k_{x,β} (B⁻¹ + K_β)⁻¹ k_{β,x}
//! ```
//!
//! and `(B⁻¹ + K_β)⁻¹` is always evaluated as `L H⁻¹ Lᵀ` with
//! `H = I + Lᵀ K_β L`, so `B` is never inverted.

mod ell;
mod grad;
mod kl;

pub use ell::{
    ell_gaussian, ell_monte_carlo, gaussian_moment_gradient, GaussianLikelihood, Likelihood,
    MomentGradient, MonteCarloEll,
};
pub use grad::{elbo, elbo_gradient, grad_ell, grad_kl, grad_kl_with_value, EllMethod, KlSampling, ModelGradient};
pub use kl::{kl_general, kl_general_with, kl_normal_prior, kl_normal_prior_with, SubspaceMeasure};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, check_finite, DgpError, Result};
use crate::kernels::{block_values, BasisPoint, KernelHyper, Points, PreparedPoints};

/// Queries are processed in row blocks of this size.
pub const CHUNK_ROWS: usize = 4096;

/// Initial diagonal of `L` for newly added covariance basis functions.
/// `∇_L = 2 ∇_B L` vanishes at `L = 0`, so zero is a stationary point.
pub const L_INIT: f64 = 1e-3;

/// Source of the covariance blocks the posterior is built from.
///
/// `KernelHyper` implements it with the SE-ARD / generalized SE-ARD pair;
/// test oracles implement it with explicit finite-dimensional features.
pub trait Covariance {
    /// `ψ_iᵀ ψ_j` between two basis lists.
    fn basis_block(&self, rows: &[BasisPoint], cols: &[BasisPoint]) -> Result<DMatrix<f64>>;
    /// N×M cross covariance between data inputs (rows) and basis points.
    fn cross_block(&self, inputs: &DMatrix<f64>, basis: &[BasisPoint]) -> Result<DMatrix<f64>>;
    /// `k(x_n, x_n)` for every input row.
    fn prior_diag(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>>;
}

impl Covariance for KernelHyper {
    fn basis_block(&self, rows: &[BasisPoint], cols: &[BasisPoint]) -> Result<DMatrix<f64>> {
        if rows.is_empty() || cols.is_empty() {
            return Ok(DMatrix::zeros(rows.len(), cols.len()));
        }
        let r = PreparedPoints::new(Points::Basis(rows), self)?;
        let c = PreparedPoints::new(Points::Basis(cols), self)?;
        Ok(block_values(&r, &c, self))
    }

    fn cross_block(&self, inputs: &DMatrix<f64>, basis: &[BasisPoint]) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), inputs.ncols())?;
        if inputs.nrows() == 0 || basis.is_empty() {
            return Ok(DMatrix::zeros(inputs.nrows(), basis.len()));
        }
        let r = PreparedPoints::new(Points::Inputs(inputs), self)?;
        let c = PreparedPoints::new(Points::Basis(basis), self)?;
        Ok(block_values(&r, &c, self))
    }

    fn prior_diag(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), inputs.ncols())?;
        Ok(DVector::from_element(inputs.nrows(), (2.0 * self.log_amplitude).exp()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledModel {
    /// Mean basis, size `M_α`.
    pub alpha: Vec<BasisPoint>,
    /// Mean coefficients.
    pub a: DVector<f64>,
    /// Covariance basis, size `M_β`.
    pub beta: Vec<BasisPoint>,
    /// Lower-triangular factor of `B = L Lᵀ`.
    pub l: DMatrix<f64>,
    pub hyper: KernelHyper,
    /// log σ² of the Gaussian likelihood.
    pub log_noise: f64,
}

impl DecoupledModel {
    /// Model with no basis functions: posterior equals the prior.
    pub fn empty(hyper: KernelHyper, log_noise: f64) -> Self {
        Self {
            alpha: Vec::new(),
            a: DVector::zeros(0),
            beta: Vec::new(),
            l: DMatrix::zeros(0, 0),
            hyper,
            log_noise,
        }
    }

    pub fn m_alpha(&self) -> usize {
        self.alpha.len()
    }

    pub fn m_beta(&self) -> usize {
        self.beta.len()
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise.exp()
    }

    /// `B = L Lᵀ`.
    pub fn b(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let dim = self.dim();
        check_dim(self.alpha.len(), self.a.len())?;
        check_dim(self.beta.len(), self.l.nrows())?;
        check_dim(self.beta.len(), self.l.ncols())?;
        for b in self.alpha.iter().chain(&self.beta) {
            check_dim(dim, b.location.len())?;
            check_dim(dim, b.log_multipliers.len())?;
            check_finite(&b.location, "basis location")?;
            check_finite(&b.log_multipliers, "basis multipliers")?;
        }
        check_finite(self.a.as_slice(), "mean coefficients")?;
        check_finite(self.l.as_slice(), "covariance factor")?;
        check_finite(&[self.log_noise], "log noise")?;
        for i in 0..self.l.nrows() {
            for j in i + 1..self.l.ncols() {
                if self.l[(i, j)] != 0.0 {
                    return Err(DgpError::Contract("L must be lower-triangular".into()));
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            m_alpha: self.m_alpha(),
            m_beta: self.m_beta(),
            dim: self.dim(),
        }
    }

    /// All trainable parameters, in `ParamLayout` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        out.extend_from_slice(self.a.as_slice());
        for b in &self.alpha {
            out.extend_from_slice(&b.location);
        }
        for b in &self.alpha {
            out.extend_from_slice(&b.log_multipliers);
        }
        out.extend(row_major(&self.l));
        for b in &self.beta {
            out.extend_from_slice(&b.location);
        }
        for b in &self.beta {
            out.extend_from_slice(&b.log_multipliers);
        }
        out.push(self.hyper.log_amplitude);
        out.extend_from_slice(&self.hyper.log_lengthscales);
        out.push(self.log_noise);
        out
    }

    /// Inverse of `to_flat`. Entries above the diagonal of `L` are ignored.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let layout = self.layout();
        check_dim(layout.len(), flat.len())?;
        let (ma, mb, dim) = (layout.m_alpha, layout.m_beta, layout.dim);
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        self.a = DVector::from_vec(take(ma));
        for b in &mut self.alpha {
            b.location = take(dim);
        }
        for b in &mut self.alpha {
            b.log_multipliers = take(dim);
        }
        let l = take(mb * mb);
        self.l = DMatrix::from_fn(mb, mb, |i, j| if j <= i { l[i * mb + j] } else { 0.0 });
        for b in &mut self.beta {
            b.location = take(dim);
        }
        for b in &mut self.beta {
            b.log_multipliers = take(dim);
        }
        self.hyper.log_amplitude = take(1)[0];
        self.hyper.log_lengthscales = take(dim);
        self.log_noise = take(1)[0];
        Ok(())
    }

    /// The mean-side and covariance-side bases coincide exactly.
    pub fn is_coupled(&self) -> bool {
        self.alpha == self.beta
    }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

/// Shape of the flat parameter vector:
/// `a | α locations | α log-multipliers | L (row-major, full) | β locations |
/// β log-multipliers | log ρ | log s | log σ²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub m_alpha: usize,
    pub m_beta: usize,
    pub dim: usize,
}

impl ParamLayout {
    fn segments(&self) -> [usize; 9] {
        let (ma, mb, d) = (self.m_alpha, self.m_beta, self.dim);
        [ma, ma * d, ma * d, mb * mb, mb * d, mb * d, 1, d, 1]
    }

    pub fn len(&self) -> usize {
        self.segments().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Move a parameter-shaped vector into a larger layout: every existing
    /// entry keeps its meaning, new entries are zero.
    pub fn transfer(&self, values: &[f64], to: &ParamLayout) -> Result<Vec<f64>> {
        check_dim(self.len(), values.len())?;
        check_dim(self.dim, to.dim)?;
        if to.m_alpha < self.m_alpha || to.m_beta < self.m_beta {
            return Err(DgpError::InvalidArgument("layouts can only grow".into()));
        }
        let src = self.segments();
        let dst = to.segments();
        let mut out = vec![0.0; to.len()];
        let (mut so, mut dso) = (0, 0);
        for seg in 0..src.len() {
            let chunk = &values[so..so + src[seg]];
            let target = &mut out[dso..dso + dst[seg]];
            if seg == 3 {
                let (mb, nb) = (self.m_beta, to.m_beta);
                for i in 0..mb {
                    target[i * nb..i * nb + mb].copy_from_slice(&chunk[i * mb..(i + 1) * mb]);
                }
            } else {
                target[..chunk.len()].copy_from_slice(chunk);
            }
            so += src[seg];
            dso += dst[seg];
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMoments {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl PredictiveMoments {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Factorization of `H = I + Lᵀ K_β L` and everything derived from it.
#[derive(Clone, Debug)]
pub struct GradientWorkspace {
    pub k_beta: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// `R = (B⁻¹ + K_β)⁻¹ = L H⁻¹ Lᵀ`.
    pub r: DMatrix<f64>,
    pub log_det_h: f64,
    h_chol: Option<Cholesky<f64, Dyn>>,
}

impl GradientWorkspace {
    pub fn new(l: &DMatrix<f64>, k_beta: DMatrix<f64>) -> Result<Self> {
        let m = l.nrows();
        check_dim(m, k_beta.nrows())?;
        if m == 0 {
            return Ok(Self {
                k_beta,
                h: DMatrix::zeros(0, 0),
                r: DMatrix::zeros(0, 0),
                log_det_h: 0.0,
                h_chol: None,
            });
        }
        let mut h = l.transpose() * &k_beta * l;
        h = (&h + h.transpose()) * 0.5;
        for i in 0..m {
            h[(i, i)] += 1.0;
        }
        check_finite(h.as_slice(), "H = I + LᵀK_βL")?;
        let chol = Cholesky::new(h.clone())
            .ok_or_else(|| DgpError::Factorization("H = I + LᵀK_βL is not positive definite".into()))?;
        let log_det_h = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let y = chol.solve(&l.transpose());
        let r = l * y;
        let r = (&r + r.transpose()) * 0.5;
        Ok(Self {
            k_beta,
            h,
            r,
            log_det_h,
            h_chol: Some(chol),
        })
    }

    pub fn for_model<C: Covariance + ?Sized>(model: &DecoupledModel, cov: &C) -> Result<Self> {
        let k_beta = cov.basis_block(&model.beta, &model.beta)?;
        Self::new(&model.l, k_beta)
    }

    pub fn m_beta(&self) -> usize {
        self.r.nrows()
    }

    /// `H⁻¹ v`.
    pub fn solve_h(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.h_chol {
            Some(c) => c.solve(v),
            None => v.clone(),
        }
    }

    /// `tr(K_β R)`.
    pub fn trace_kr(&self) -> f64 {
        self.k_beta.component_mul(&self.r).sum()
    }
}

/// Predictive moments with the SE-ARD kernel of the model.
pub fn predict(model: &DecoupledModel, queries: &DMatrix<f64>) -> Result<PredictiveMoments> {
    predict_with(model, &model.hyper, queries)
}

pub fn predict_with<C: Covariance + ?Sized>(
    model: &DecoupledModel,
    cov: &C,
    queries: &DMatrix<f64>,
) -> Result<PredictiveMoments> {
    model.validate()?;
    if queries.nrows() == 0 {
        return Err(DgpError::InvalidArgument("no query points".into()));
    }
    check_dim(model.dim(), queries.ncols())?;
    let ws = GradientWorkspace::for_model(model, cov)?;
    let n = queries.nrows();
    let mut mean = DVector::zeros(n);
    let mut variance = DVector::zeros(n);
    let mut start = 0;
    while start < n {
        let len = CHUNK_ROWS.min(n - start);
        let x = queries.rows(start, len).into_owned();
        let k_xa = cov.cross_block(&x, &model.alpha)?;
        let k_xb = cov.cross_block(&x, &model.beta)?;
        let diag = cov.prior_diag(&x)?;
        mean.rows_mut(start, len).copy_from(&(&k_xa * &model.a));
        let s = variance_from_blocks(&k_xb, &ws.r, &diag);
        variance.rows_mut(start, len).copy_from(&s);
        start += len;
    }
    Ok(PredictiveMoments { mean, variance })
}

/// `diag(K_X) − rowsum(K_{X,β} ⊙ K_{X,β} R)`, clamped at zero.
pub(crate) fn variance_from_blocks(
    k_xb: &DMatrix<f64>,
    r: &DMatrix<f64>,
    diag: &DVector<f64>,
) -> DVector<f64> {
    if k_xb.ncols() == 0 {
        return diag.clone();
    }
    let kr = k_xb * r;
    DVector::from_fn(k_xb.nrows(), |i, _| {
        let q: f64 = k_xb.row(i).iter().zip(kr.row(i).iter()).map(|(a, b)| a * b).sum();
        (diag[i] - q).max(0.0)
    })
}

/// Canonical `(m̃, S̃)` of a coupled model (`α = β = Z`):
/// `m̃ = K_Z a`, `S̃ = K_Z − K_Z (B⁻¹ + K_Z)⁻¹ K_Z`.
pub fn to_canonical(model: &DecoupledModel) -> Result<(DVector<f64>, DMatrix<f64>)> {
    model.validate()?;
    if !model.is_coupled() {
        return Err(DgpError::Contract(
            "canonical form needs identical mean and covariance bases".into(),
        ));
    }
    let k = model.hyper.basis_block(&model.alpha, &model.alpha)?;
    let ws = GradientWorkspace::new(&model.l, k.clone())?;
    let m = &k * &model.a;
    let s = &k - &k * &ws.r * &k;
    let s = (&s + s.transpose()) * 0.5;
    Ok((m, s))
}
