//! Analytic gradients of the KL term, the expected log-likelihood and the
//! evidence lower bound.
//!
//! Every kernel-dependent term is handled the same way: form the adjoint
//! `G = ∂objective/∂K` of a covariance block, then contract it against the
//! closed-form kernel partials (`kernels::contract`). The adjoints are
//!
//! | term                         | block      | adjoint                         |
//! |------------------------------|------------|---------------------------------|
//! | `½ aᵀK_α a`                  | `K_α`      | `½ a aᵀ`                        |
//! | `½ log|H| − ½ tr(K_β R)`     | `K_β`      | `½ R K_β R`                     |
//! | `m̂ = K_{X,α} a`              | `K_{X,α}`  | `∇m̂ aᵀ`                         |
//! | `ŝ = diag K_X − diag(K_{X,β} R K_{β,X})` | `K_{X,β}` | `−2 diag(∇ŝ) K_{X,β} R` |
//! |                              | `K_β`      | `R W R`, `W = K_{β,X} diag(∇ŝ) K_{X,β}` |
//!
//! with `R = (B⁻¹ + K_β)⁻¹`. The `B` gradients are
//! `∇_B KL = ½ (K R K − K R K R K)` and `∇_B e = −(I − K R) W (I − R K)`,
//! chained to `∇_L = 2 ∇_B L` and restricted to the lower triangle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ell::{ell_gaussian, ell_monte_carlo, gaussian_moment_gradient, GaussianLikelihood, MomentGradient};
use super::kl::kl_normal_prior;
use super::{predict, variance_from_blocks, DecoupledModel, GradientWorkspace, PredictiveMoments, CHUNK_ROWS};
use crate::error::{check_dim, check_finite, DgpError, Result};
use crate::kernels::{block_values, contract, BlockGradient, Points, PreparedPoints};

/// How `∇_a` and `∇_α` of the KL term are evaluated.
#[derive(Clone, Debug, PartialEq)]
pub enum KlSampling {
    Exact,
    /// Use only the listed columns of `K_α`, scaled by `scale`.
    Columns { indices: Vec<usize>, scale: f64 },
}

impl KlSampling {
    /// Column subset with the unbiased scale `M_α / |S|`.
    pub fn columns(indices: Vec<usize>, m_alpha: usize) -> Self {
        let scale = m_alpha as f64 / indices.len().max(1) as f64;
        KlSampling::Columns { indices, scale }
    }
}

/// How the expected log-likelihood and its moment derivatives are
/// obtained inside `elbo_gradient`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllMethod {
    Gaussian,
    MonteCarlo { n_samples: usize },
}

/// Gradient with the same shape as `DecoupledModel`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradient {
    pub d_a: DVector<f64>,
    /// `M_α × D`.
    pub d_alpha_locations: DMatrix<f64>,
    /// `M_α × D`, with respect to log multipliers.
    pub d_alpha_multipliers: DMatrix<f64>,
    /// Lower-triangular `M_β × M_β`.
    pub d_l: DMatrix<f64>,
    pub d_beta_locations: DMatrix<f64>,
    pub d_beta_multipliers: DMatrix<f64>,
    pub d_log_amplitude: f64,
    pub d_log_lengthscales: DVector<f64>,
    pub d_log_noise: f64,
}

impl ModelGradient {
    pub fn zeros(model: &DecoupledModel) -> Self {
        let (ma, mb, d) = (model.m_alpha(), model.m_beta(), model.dim());
        Self {
            d_a: DVector::zeros(ma),
            d_alpha_locations: DMatrix::zeros(ma, d),
            d_alpha_multipliers: DMatrix::zeros(ma, d),
            d_l: DMatrix::zeros(mb, mb),
            d_beta_locations: DMatrix::zeros(mb, d),
            d_beta_multipliers: DMatrix::zeros(mb, d),
            d_log_amplitude: 0.0,
            d_log_lengthscales: DVector::zeros(d),
            d_log_noise: 0.0,
        }
    }

    /// Flat vector in `ParamLayout` order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.d_a.as_slice());
        out.extend(super::row_major(&self.d_alpha_locations));
        out.extend(super::row_major(&self.d_alpha_multipliers));
        out.extend(super::row_major(&self.d_l));
        out.extend(super::row_major(&self.d_beta_locations));
        out.extend(super::row_major(&self.d_beta_multipliers));
        out.push(self.d_log_amplitude);
        out.extend_from_slice(self.d_log_lengthscales.as_slice());
        out.push(self.d_log_noise);
        out
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &ModelGradient) {
        self.d_a += &other.d_a * s;
        self.d_alpha_locations += &other.d_alpha_locations * s;
        self.d_alpha_multipliers += &other.d_alpha_multipliers * s;
        self.d_l += &other.d_l * s;
        self.d_beta_locations += &other.d_beta_locations * s;
        self.d_beta_multipliers += &other.d_beta_multipliers * s;
        self.d_log_amplitude += s * other.d_log_amplitude;
        self.d_log_lengthscales += &other.d_log_lengthscales * s;
        self.d_log_noise += s * other.d_log_noise;
    }

    pub fn scale(&mut self, s: f64) {
        self.d_a *= s;
        self.d_alpha_locations *= s;
        self.d_alpha_multipliers *= s;
        self.d_l *= s;
        self.d_beta_locations *= s;
        self.d_beta_multipliers *= s;
        self.d_log_amplitude *= s;
        self.d_log_lengthscales *= s;
        self.d_log_noise *= s;
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    fn add_hyper(&mut self, g: &BlockGradient) {
        self.d_log_amplitude += g.log_amplitude;
        for (d, v) in g.log_lengthscales.iter().enumerate() {
            self.d_log_lengthscales[d] += v;
        }
    }
}

fn lower(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| if j <= i { m[(i, j)] } else { 0.0 })
}

struct Bases {
    alpha: PreparedPoints,
    beta: PreparedPoints,
}

impl Bases {
    fn new(model: &DecoupledModel) -> Result<Self> {
        Ok(Self {
            alpha: PreparedPoints::new(Points::Basis(&model.alpha), &model.hyper)?,
            beta: PreparedPoints::new(Points::Basis(&model.beta), &model.hyper)?,
        })
    }
}

/// Gradient of `KL(q ‖ p)` for the normal prior.
pub fn grad_kl(model: &DecoupledModel, sampling: &KlSampling) -> Result<ModelGradient> {
    grad_kl_with_value(model, sampling).map(|(_, g)| g)
}

/// KL gradient together with the matching KL value. With column sampling
/// the quadratic term `½ aᵀK_α a` is the unbiased estimate `½ aᵀ∇_a`.
pub fn grad_kl_with_value(model: &DecoupledModel, sampling: &KlSampling) -> Result<(f64, ModelGradient)> {
    model.validate()?;
    let bases = Bases::new(model)?;
    kl_gradient(model, &bases, sampling)
}

fn kl_gradient(model: &DecoupledModel, bases: &Bases, sampling: &KlSampling) -> Result<(f64, ModelGradient)> {
    let hyper = &model.hyper;
    let ma = model.m_alpha();
    let mut g = ModelGradient::zeros(model);

    let (idx, scale): (Vec<usize>, f64) = match sampling {
        KlSampling::Exact => ((0..ma).collect(), 1.0),
        KlSampling::Columns { indices, scale } => {
            if indices.is_empty() {
                return Err(DgpError::InvalidArgument("column sample is empty".into()));
            }
            let mut seen = vec![false; ma];
            for &j in indices {
                if j >= ma || std::mem::replace(&mut seen[j], true) {
                    return Err(DgpError::InvalidArgument(format!(
                        "column index {j} is out of range or repeated"
                    )));
                }
            }
            (indices.clone(), *scale)
        }
    };

    if ma > 0 {
        let cols = bases.alpha.select(&idx);
        let k = block_values(&bases.alpha, &cols, hyper);
        let a_s = DVector::from_iterator(idx.len(), idx.iter().map(|&j| model.a[j]));
        g.d_a = &k * &a_s * scale;
        let adj = &model.a * a_s.transpose() * (0.5 * scale);
        let bg = contract(&bases.alpha, &cols, &k, &adj);
        g.d_alpha_locations += &bg.row_location;
        g.d_alpha_multipliers += &bg.row_log_length;
        for (jj, &j) in idx.iter().enumerate() {
            for d in 0..model.dim() {
                g.d_alpha_locations[(j, d)] += bg.col_location[(jj, d)];
                g.d_alpha_multipliers[(j, d)] += bg.col_log_length[(jj, d)];
            }
        }
        g.add_hyper(&bg);
    }
    let quad = model.a.dot(&g.d_a);

    let k_beta = block_values(&bases.beta, &bases.beta, hyper);
    let ws = GradientWorkspace::new(&model.l, k_beta)?;
    if model.m_beta() > 0 {
        let k = &ws.k_beta;
        let kr = k * &ws.r;
        let rkr = ws.r.transpose() * &kr;
        let bg = contract(&bases.beta, &bases.beta, k, &(rkr * 0.5));
        g.d_beta_locations += &bg.row_location + &bg.col_location;
        g.d_beta_multipliers += &bg.row_log_length + &bg.col_log_length;
        g.add_hyper(&bg);
        let krk = &kr * k;
        let grad_b = (&krk - &krk * &ws.r * k) * 0.5;
        g.d_l = lower(grad_b * &model.l * 2.0);
    }
    let value = 0.5 * quad + 0.5 * ws.log_det_h - 0.5 * ws.trace_kr();
    Ok((value, g))
}

/// Kernel blocks of one row chunk of a batch.
struct ChunkBlocks {
    start: usize,
    inputs: PreparedPoints,
    k_xa: DMatrix<f64>,
    k_xb: DMatrix<f64>,
}

fn batch_blocks(model: &DecoupledModel, bases: &Bases, inputs: &DMatrix<f64>) -> Result<Vec<ChunkBlocks>> {
    let all = PreparedPoints::new(Points::Inputs(inputs), &model.hyper)?;
    let n = inputs.nrows();
    let mut out = Vec::with_capacity(n.div_ceil(CHUNK_ROWS));
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK_ROWS).min(n);
        let x = all.slice(start, end);
        let k_xa = block_values(&x, &bases.alpha, &model.hyper);
        let k_xb = block_values(&x, &bases.beta, &model.hyper);
        out.push(ChunkBlocks {
            start,
            inputs: x,
            k_xa,
            k_xb,
        });
        start = end;
    }
    Ok(out)
}

fn moments_from_blocks(model: &DecoupledModel, ws: &GradientWorkspace, chunks: &[ChunkBlocks], n: usize) -> PredictiveMoments {
    let mut mean = DVector::zeros(n);
    let mut variance = DVector::zeros(n);
    let rho2 = (2.0 * model.hyper.log_amplitude).exp();
    for c in chunks {
        let len = c.k_xa.nrows();
        mean.rows_mut(c.start, len).copy_from(&(&c.k_xa * &model.a));
        let diag = DVector::from_element(len, rho2);
        variance
            .rows_mut(c.start, len)
            .copy_from(&variance_from_blocks(&c.k_xb, &ws.r, &diag));
    }
    PredictiveMoments { mean, variance }
}

fn ell_gradient_from_blocks(
    model: &DecoupledModel,
    bases: &Bases,
    ws: &GradientWorkspace,
    chunks: &[ChunkBlocks],
    mg: &MomentGradient,
) -> ModelGradient {
    let mut g = ModelGradient::zeros(model);
    let mb = model.m_beta();
    let rho2 = (2.0 * model.hyper.log_amplitude).exp();
    let mut w = DMatrix::zeros(mb, mb);
    for c in chunks {
        let len = c.k_xa.nrows();
        let dm = mg.d_mean.rows(c.start, len);
        let ds = mg.d_variance.rows(c.start, len);
        if model.m_alpha() > 0 {
            g.d_a += c.k_xa.tr_mul(&dm);
            let adj = dm * model.a.transpose();
            let bg = contract(&c.inputs, &bases.alpha, &c.k_xa, &adj);
            g.d_alpha_locations += &bg.col_location;
            g.d_alpha_multipliers += &bg.col_log_length;
            g.add_hyper(&bg);
        }
        if mb > 0 {
            let mut adj = &c.k_xb * &ws.r;
            for (i, mut row) in adj.row_iter_mut().enumerate() {
                row *= -2.0 * ds[i];
            }
            let bg = contract(&c.inputs, &bases.beta, &c.k_xb, &adj);
            g.d_beta_locations += &bg.col_location;
            g.d_beta_multipliers += &bg.col_log_length;
            g.add_hyper(&bg);
            let mut scaled = c.k_xb.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= ds[i];
            }
            w += c.k_xb.tr_mul(&scaled);
        }
        g.d_log_amplitude += 2.0 * rho2 * ds.sum();
    }
    if mb > 0 {
        let k = &ws.k_beta;
        let eye = DMatrix::<f64>::identity(mb, mb);
        let left = &eye - k * &ws.r;
        let grad_b = -(&left * &w * left.transpose());
        g.d_l = lower(grad_b * &model.l * 2.0);
        let adj = &ws.r * &w * &ws.r;
        let bg = contract(&bases.beta, &bases.beta, k, &adj);
        g.d_beta_locations += &bg.row_location + &bg.col_location;
        g.d_beta_multipliers += &bg.row_log_length + &bg.col_log_length;
        g.add_hyper(&bg);
    }
    g.d_log_noise = mg.d_log_noise;
    g
}

/// Chain moment derivatives `(∇m̂, ∇ŝ, ∇_θ)` of an expected log-likelihood
/// on `inputs` through to every model parameter.
pub fn grad_ell(model: &DecoupledModel, inputs: &DMatrix<f64>, mg: &MomentGradient) -> Result<ModelGradient> {
    model.validate()?;
    check_dim(inputs.nrows(), mg.d_mean.len())?;
    check_dim(inputs.nrows(), mg.d_variance.len())?;
    check_finite(mg.d_mean.as_slice(), "mean derivative")?;
    check_finite(mg.d_variance.as_slice(), "variance derivative")?;
    let bases = Bases::new(model)?;
    let ws = GradientWorkspace::new(&model.l, block_values(&bases.beta, &bases.beta, &model.hyper))?;
    let chunks = batch_blocks(model, &bases, inputs)?;
    Ok(ell_gradient_from_blocks(model, &bases, &ws, &chunks, mg))
}

/// `(N / N_m) Σ_batch E_q[log N(y | f, σ²)] − KL(q ‖ p)`.
pub fn elbo(model: &DecoupledModel, inputs: &DMatrix<f64>, targets: &DVector<f64>, n_total: usize) -> Result<f64> {
    let n = check_batch(inputs, targets, n_total)?;
    let moments = predict(model, inputs)?;
    let ell = ell_gaussian(&moments, targets, model.log_noise)?;
    Ok(n_total as f64 / n as f64 * ell - kl_normal_prior(model)?)
}

fn check_batch(inputs: &DMatrix<f64>, targets: &DVector<f64>, n_total: usize) -> Result<usize> {
    let n = inputs.nrows();
    check_dim(n, targets.len())?;
    if n == 0 {
        return Err(DgpError::InvalidArgument("empty batch".into()));
    }
    if n_total < n {
        return Err(DgpError::InvalidArgument(format!(
            "dataset size {n_total} is smaller than the batch ({n})"
        )));
    }
    Ok(n)
}

/// Minibatch ELBO estimate and its gradient in one pass over the kernel
/// blocks. `rng` is only consumed by the Monte-Carlo likelihood.
pub fn elbo_gradient<R: Rng + ?Sized>(
    model: &DecoupledModel,
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    n_total: usize,
    sampling: &KlSampling,
    method: EllMethod,
    rng: &mut R,
) -> Result<(f64, ModelGradient)> {
    model.validate()?;
    let n = check_batch(inputs, targets, n_total)?;
    let bases = Bases::new(model)?;
    let ws = GradientWorkspace::new(&model.l, block_values(&bases.beta, &bases.beta, &model.hyper))?;
    let chunks = batch_blocks(model, &bases, inputs)?;
    let moments = moments_from_blocks(model, &ws, &chunks, n);
    let (ell, mg) = match method {
        EllMethod::Gaussian => (
            ell_gaussian(&moments, targets, model.log_noise)?,
            gaussian_moment_gradient(&moments, targets, model.log_noise)?,
        ),
        EllMethod::MonteCarlo { n_samples } => {
            let mut m = moments.clone();
            m.variance.iter_mut().for_each(|s| *s = s.max(1e-12));
            let lik = GaussianLikelihood {
                log_noise: model.log_noise,
            };
            let mc = ell_monte_carlo(&m, targets, &lik, n_samples, rng)?;
            (mc.value, mc.moment_gradient())
        }
    };
    let g_ell = ell_gradient_from_blocks(model, &bases, &ws, &chunks, &mg);
    let (kl, g_kl) = kl_gradient(model, &bases, sampling)?;
    let scale = n_total as f64 / n as f64;
    let mut g = g_ell;
    g.scale(scale);
    g.axpy(-1.0, &g_kl);
    Ok((scale * ell - kl, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::random_model;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_mean_coefficients_have_zero_kl_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut m = random_model(&mut rng, 5, 3, 2);
        m.a.fill(0.0);
        let g = grad_kl(&m, &KlSampling::Exact).unwrap();
        assert!(g.d_a.iter().all(|v| *v == 0.0));
        assert!(g.d_alpha_locations.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_factor_has_zero_l_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut m = random_model(&mut rng, 3, 4, 2);
        m.l.fill(0.0);
        let g = grad_kl(&m, &KlSampling::Exact).unwrap();
        assert!(g.d_l.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_moment_derivatives_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = random_model(&mut rng, 4, 3, 2);
        let x = DMatrix::from_fn(6, 2, |i, j| (i as f64 - 2.5) * 0.4 + j as f64 * 0.1);
        let mg = MomentGradient {
            d_mean: DVector::zeros(6),
            d_variance: DVector::zeros(6),
            d_log_noise: 0.0,
        };
        let g = grad_ell(&m, &x, &mg).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn amplitude_gradient_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..5 {
            let m = random_model(&mut rng, 5, 3, 2);
            let x = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-2.0..2.0));
            let mg = MomentGradient {
                d_mean: DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0)),
                d_variance: DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0)),
                d_log_noise: 0.0,
            };
            let p = predict(&m, &x).unwrap();
            let want = p.mean.dot(&mg.d_mean) + 2.0 * p.variance.dot(&mg.d_variance);
            let g = grad_ell(&m, &x, &mg).unwrap();
            assert_abs_diff_eq!(g.d_log_amplitude, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn kl_value_with_exact_sampling_matches_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let m = random_model(&mut rng, 6, 3, 2);
        let (v, _) = grad_kl_with_value(&m, &KlSampling::Exact).unwrap();
        assert_abs_diff_eq!(v, kl_normal_prior(&m).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn column_sampling_rejects_bad_index_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let m = random_model(&mut rng, 4, 2, 1);
        assert!(grad_kl(&m, &KlSampling::columns(vec![], 4)).is_err());
        assert!(grad_kl(&m, &KlSampling::columns(vec![4], 4)).is_err());
        assert!(grad_kl(&m, &KlSampling::columns(vec![1, 1], 4)).is_err());
    }

    #[test]
    fn full_column_set_equals_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let m = random_model(&mut rng, 5, 2, 2);
        let exact = grad_kl(&m, &KlSampling::Exact).unwrap();
        let cols = grad_kl(&m, &KlSampling::columns((0..5).rev().collect(), 5)).unwrap();
        for (a, b) in exact.to_flat().iter().zip(cols.to_flat()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn elbo_gradient_value_matches_elbo() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let m = random_model(&mut rng, 5, 3, 2);
        let x = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let (v, _) = elbo_gradient(&m, &x, &y, 20, &KlSampling::Exact, EllMethod::Gaussian, &mut rng).unwrap();
        assert_abs_diff_eq!(v, elbo(&m, &x, &y, 20).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn elbo_rejects_bad_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let m = random_model(&mut rng, 2, 1, 1);
        let x = DMatrix::zeros(3, 1);
        let y = DVector::zeros(3);
        assert!(elbo(&m, &x, &y, 2).is_err());
        assert!(elbo(&m, &DMatrix::zeros(0, 1), &DVector::zeros(0), 2).is_err());
    }
}
