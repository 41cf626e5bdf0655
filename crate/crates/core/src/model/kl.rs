use nalgebra::{DMatrix, DVector};

use super::{Covariance, DecoupledModel, GradientWorkspace};
use crate::error::{check_dim, Result};
use crate::kernels::BasisPoint;

/// `KL(q ‖ p)` against the normal prior:
/// `½ aᵀK_α a + ½ log|H| − ½ tr(K_β L H⁻¹ Lᵀ)`.
pub fn kl_normal_prior(model: &DecoupledModel) -> Result<f64> {
    kl_normal_prior_with(model, &model.hyper)
}

pub fn kl_normal_prior_with<C: Covariance + ?Sized>(model: &DecoupledModel, cov: &C) -> Result<f64> {
    model.validate()?;
    let k_alpha = cov.basis_block(&model.alpha, &model.alpha)?;
    let ws = GradientWorkspace::for_model(model, cov)?;
    let quad = model.a.dot(&(&k_alpha * &model.a));
    Ok(0.5 * quad + 0.5 * ws.log_det_h - 0.5 * ws.trace_kr())
}

/// A Gaussian measure `N(Ψ_α a, (I + Ψ_β L Lᵀ Ψ_βᵀ)⁻¹)`.
#[derive(Clone, Copy, Debug)]
pub struct SubspaceMeasure<'a> {
    pub alpha: &'a [BasisPoint],
    pub a: &'a DVector<f64>,
    pub beta: &'a [BasisPoint],
    pub l: &'a DMatrix<f64>,
}

impl<'a> From<&'a DecoupledModel> for SubspaceMeasure<'a> {
    fn from(m: &'a DecoupledModel) -> Self {
        Self {
            alpha: &m.alpha,
            a: &m.a,
            beta: &m.beta,
            l: &m.l,
        }
    }
}

/// KL divergence between two subspace-parametrized measures sharing the
/// kernel of `q_model`.
pub fn kl_general(q: SubspaceMeasure, p: SubspaceMeasure, q_model: &DecoupledModel) -> Result<f64> {
    kl_general_with(q, p, &q_model.hyper)
}

/// ```text
/// KL = −½ tr(G_β R) + ½ log|H| + ½ aᵀG_α a − aᵀG_{α,ᾱ} ā + C
/// C  = ½ (tr(K_β̄ B̄) − log|H̄| + āᵀG_ᾱ ā)
/// G_{u,v} = K_{u,v} + K_{u,β̄} B̄ K_{β̄,v}
/// ```
pub fn kl_general_with<C: Covariance + ?Sized>(
    q: SubspaceMeasure,
    p: SubspaceMeasure,
    cov: &C,
) -> Result<f64> {
    check_dim(q.alpha.len(), q.a.len())?;
    check_dim(p.alpha.len(), p.a.len())?;
    check_dim(q.beta.len(), q.l.nrows())?;
    check_dim(p.beta.len(), p.l.nrows())?;

    let b_bar = p.l * p.l.transpose();
    let g = |u: &[BasisPoint], v: &[BasisPoint]| -> Result<DMatrix<f64>> {
        let k_uv = cov.basis_block(u, v)?;
        let k_ub = cov.basis_block(u, p.beta)?;
        let k_bv = cov.basis_block(p.beta, v)?;
        Ok(k_uv + k_ub * &b_bar * k_bv)
    };

    let ws_q = GradientWorkspace::new(q.l, cov.basis_block(q.beta, q.beta)?)?;
    let ws_p = GradientWorkspace::new(p.l, cov.basis_block(p.beta, p.beta)?)?;

    let g_beta = g(q.beta, q.beta)?;
    let g_alpha = g(q.alpha, q.alpha)?;
    let g_cross = g(q.alpha, p.alpha)?;
    let g_alpha_bar = g(p.alpha, p.alpha)?;

    let tr_gr = g_beta.component_mul(&ws_q.r).sum();
    let quad = q.a.dot(&(&g_alpha * q.a));
    let cross = q.a.dot(&(&g_cross * p.a));
    let constant = 0.5
        * (ws_p.k_beta.component_mul(&b_bar).sum() - ws_p.log_det_h + p.a.dot(&(&g_alpha_bar * p.a)));
    Ok(-0.5 * tr_gr + 0.5 * ws_q.log_det_h + 0.5 * quad - cross + constant)
}
