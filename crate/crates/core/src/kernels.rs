//! SE-ARD prior kernel and the generalized SE-ARD kernel used for the
//! variational basis functions.
//!
//! Every covariance in the model is an instance of one per-dimension
//! factor. For two points with effective length scales `l` and `l'` along
//! dimension `d`,
//!
//! ```text
//! f_d = (2 l l' / (l² + l'²))^{1/2} · exp(−(x_d − x'_d)² / (l² + l'²))
//! ```
//!
//! A data input has `l = s_d`; a basis point has `l = s_d · c_d`. With
//! `p` the number of data inputs among the two arguments, the covariance is
//! `ρ^p · Π_d f_d`:
//!
//! * prior `k(x, x')` (p = 2) is the usual SE-ARD kernel, since the
//!   prefactor is exactly one when both length scales equal `s_d`;
//! * cross `C[L f(x̃), f(x)]` (p = 1) is `ρ ψ_x̃ᵀ φ_x`;
//! * basis `ψ_x̃ᵀ ψ_x̃'` (p = 0) carries no amplitude.
//!
//! Hyperparameters and multipliers live in log space, so every partial
//! derivative below is taken with respect to a log parameter.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, DgpError, Result};

/// Shared prior hyperparameters: amplitude `ρ` and ARD length scales `s_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelHyper {
    pub fn new(amplitude: f64, lengthscales: &[f64]) -> Result<Self> {
        if !(amplitude > 0.0) || lengthscales.iter().any(|s| !(*s > 0.0)) {
            return Err(DgpError::InvalidArgument(
                "amplitude and length scales must be positive".into(),
            ));
        }
        let hyper = Self {
            log_amplitude: amplitude.ln(),
            log_lengthscales: lengthscales.iter().map(|s| s.ln()).collect(),
        };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn amplitude(&self) -> f64 {
        self.log_amplitude.exp()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|v| v.exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_lengthscales.is_empty() {
            return Err(DgpError::InvalidArgument(
                "kernel needs at least one input dimension".into(),
            ));
        }
        check_finite(&[self.log_amplitude], "log amplitude")?;
        check_finite(&self.log_lengthscales, "log length scales")
    }
}

/// Location of an inducing function plus its per-dimension length-scale
/// multipliers (`l_d = s_d · c_d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisPoint {
    pub location: Vec<f64>,
    pub log_multipliers: Vec<f64>,
}

impl BasisPoint {
    /// Basis point with unit multipliers, i.e. `ψ_x = φ_x`.
    pub fn at(location: &[f64]) -> Self {
        Self {
            location: location.to_vec(),
            log_multipliers: vec![0.0; location.len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        check_dim(dim, self.location.len())?;
        check_dim(dim, self.log_multipliers.len())?;
        check_finite(&self.location, "basis location")?;
        check_finite(&self.log_multipliers, "basis multipliers")
    }
}

/// `k(x, x2) = ρ² Π_d exp(−(x_d − x2_d)² / (2 s_d²))`.
pub fn se_ard_cov(x: &[f64], x2: &[f64], hyper: &KernelHyper) -> Result<f64> {
    hyper.validate()?;
    let dim = hyper.dim();
    check_dim(dim, x.len())?;
    check_dim(dim, x2.len())?;
    check_finite(x, "input")?;
    check_finite(x2, "input")?;
    let mut expo = 0.0;
    for d in 0..dim {
        let s = hyper.log_lengthscales[d].exp();
        let r = x[d] - x2[d];
        expo += r * r / (2.0 * s * s);
    }
    Ok((2.0 * hyper.log_amplitude).exp() * (-expo).exp())
}

/// `ψ_bᵀ ψ_b2` of the generalized SE-ARD kernel. No amplitude factor.
pub fn gen_basis_cov(b: &BasisPoint, b2: &BasisPoint, hyper: &KernelHyper) -> Result<f64> {
    hyper.validate()?;
    b.validate(hyper.dim())?;
    b2.validate(hyper.dim())?;
    let (mut pref, mut expo) = (1.0, 0.0);
    for d in 0..hyper.dim() {
        let s = hyper.log_lengthscales[d];
        let l1 = (s + b.log_multipliers[d]).exp();
        let l2 = (s + b2.log_multipliers[d]).exp();
        let (p, e) = dim_factor(b.location[d] - b2.location[d], l1, l2);
        pref *= p;
        expo += e;
    }
    Ok(pref.sqrt() * (-expo).exp())
}

/// `C[L f(x̃), f(x)] = ρ ψ_bᵀ φ_x`.
pub fn gen_cross_cov(b: &BasisPoint, x: &[f64], hyper: &KernelHyper) -> Result<f64> {
    hyper.validate()?;
    b.validate(hyper.dim())?;
    check_dim(hyper.dim(), x.len())?;
    check_finite(x, "input")?;
    let (mut pref, mut expo) = (1.0, 0.0);
    for d in 0..hyper.dim() {
        let s = hyper.log_lengthscales[d];
        let l1 = (s + b.log_multipliers[d]).exp();
        let l2 = s.exp();
        let (p, e) = dim_factor(b.location[d] - x[d], l1, l2);
        pref *= p;
        expo += e;
    }
    Ok(hyper.log_amplitude.exp() * pref.sqrt() * (-expo).exp())
}

#[inline]
fn dim_factor(r: f64, l1: f64, l2: f64) -> (f64, f64) {
    let sum_sq = l1 * l1 + l2 * l2;
    (2.0 * l1 * l2 / sum_sq, r * r / sum_sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// data input × data input
    Prior,
    /// basis point × data input, either order
    Cross,
    /// basis point × basis point
    Basis,
}

/// One side of a kernel block.
#[derive(Clone, Copy, Debug)]
pub enum Points<'a> {
    /// N×D matrix, one data input per row.
    Inputs(&'a DMatrix<f64>),
    Basis(&'a [BasisPoint]),
}

impl Points<'_> {
    pub fn len(&self) -> usize {
        match self {
            Points::Inputs(x) => x.nrows(),
            Points::Basis(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_basis(&self) -> bool {
        matches!(self, Points::Basis(_))
    }
}

/// Parameters a kernel block can be differentiated against. `Row*`/`Col*`
/// partials are taken with respect to the point of that row (column) only,
/// so `∂K_ij/∂x_{i,d}` is stored at `(i, j)` of `RowLocation(d)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelParam {
    LogAmplitude,
    LogLengthscale(usize),
    RowLocation(usize),
    RowLogMultiplier(usize),
    ColLocation(usize),
    ColLogMultiplier(usize),
}

#[derive(Clone, Debug)]
pub struct KernelBlock {
    pub kind: KernelKind,
    pub values: DMatrix<f64>,
    pub partials: Vec<(KernelParam, DMatrix<f64>)>,
}

impl KernelBlock {
    pub fn partial(&self, param: KernelParam) -> Option<&DMatrix<f64>> {
        self.partials
            .iter()
            .find(|(p, _)| *p == param)
            .map(|(_, m)| m)
    }
}

/// Every partial a block supports, in a fixed order.
pub fn all_partials(rows: Points, cols: Points, dim: usize) -> Vec<KernelParam> {
    let mut wants = vec![KernelParam::LogAmplitude];
    for d in 0..dim {
        wants.push(KernelParam::LogLengthscale(d));
        wants.push(KernelParam::RowLocation(d));
        wants.push(KernelParam::ColLocation(d));
        if rows.is_basis() {
            wants.push(KernelParam::RowLogMultiplier(d));
        }
        if cols.is_basis() {
            wants.push(KernelParam::ColLogMultiplier(d));
        }
    }
    wants
}

/// Assemble a covariance block and any requested analytic partials.
pub fn kernel_block(
    rows: Points,
    cols: Points,
    hyper: &KernelHyper,
    wants: &[KernelParam],
) -> Result<KernelBlock> {
    if rows.is_empty() || cols.is_empty() {
        return Err(DgpError::InvalidArgument("kernel block needs nonempty point lists".into()));
    }
    let kind = match (rows.is_basis(), cols.is_basis()) {
        (false, false) => KernelKind::Prior,
        (true, true) => KernelKind::Basis,
        _ => KernelKind::Cross,
    };
    let r = PreparedPoints::new(rows, hyper)?;
    let c = PreparedPoints::new(cols, hyper)?;
    let values = block_values(&r, &c, hyper);
    let dim = hyper.dim();
    let mut partials = Vec::with_capacity(wants.len());
    for &param in wants {
        let valid = match param {
            KernelParam::LogAmplitude => true,
            KernelParam::LogLengthscale(d)
            | KernelParam::RowLocation(d)
            | KernelParam::ColLocation(d) => d < dim,
            KernelParam::RowLogMultiplier(d) => d < dim && r.basis,
            KernelParam::ColLogMultiplier(d) => d < dim && c.basis,
        };
        if !valid {
            return Err(DgpError::InvalidArgument(format!(
                "partial {param:?} is not defined for this block"
            )));
        }
        let power = amplitude_power(&r, &c) as f64;
        let m = DMatrix::from_fn(values.nrows(), values.ncols(), |i, j| {
            let v = values[(i, j)];
            match param {
                KernelParam::LogAmplitude => power * v,
                KernelParam::RowLocation(d) => {
                    let (dx, _, _) = r.pair(&c, i, j, d);
                    v * dx
                }
                KernelParam::ColLocation(d) => {
                    let (dx, _, _) = r.pair(&c, i, j, d);
                    -v * dx
                }
                KernelParam::RowLogMultiplier(d) => v * r.pair(&c, i, j, d).1,
                KernelParam::ColLogMultiplier(d) => v * r.pair(&c, i, j, d).2,
                KernelParam::LogLengthscale(d) => {
                    let (_, a, b) = r.pair(&c, i, j, d);
                    v * (a + b)
                }
            }
        });
        partials.push((param, m));
    }
    Ok(KernelBlock {
        kind,
        values,
        partials,
    })
}

/// Point list flattened row-major with precomputed effective length scales.
#[derive(Clone, Debug)]
pub(crate) struct PreparedPoints {
    pub n: usize,
    pub dim: usize,
    pub basis: bool,
    loc: Vec<f64>,
    len: Vec<f64>,
    len_sq: Vec<f64>,
}

impl PreparedPoints {
    pub fn new(points: Points, hyper: &KernelHyper) -> Result<Self> {
        hyper.validate()?;
        let dim = hyper.dim();
        let n = points.len();
        let mut loc = Vec::with_capacity(n * dim);
        let mut len = Vec::with_capacity(n * dim);
        match points {
            Points::Inputs(x) => {
                check_dim(dim, x.ncols())?;
                check_finite(x.as_slice(), "inputs")?;
                let s: Vec<f64> = hyper.lengthscales();
                for i in 0..n {
                    for d in 0..dim {
                        loc.push(x[(i, d)]);
                        len.push(s[d]);
                    }
                }
            }
            Points::Basis(bs) => {
                for b in bs {
                    b.validate(dim)?;
                    loc.extend_from_slice(&b.location);
                    for d in 0..dim {
                        len.push((hyper.log_lengthscales[d] + b.log_multipliers[d]).exp());
                    }
                }
            }
        }
        let len_sq = len.iter().map(|l| l * l).collect();
        Ok(Self {
            n,
            dim,
            basis: points.is_basis(),
            loc,
            len,
            len_sq,
        })
    }

    /// Subset of the points, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self {
            n: idx.len(),
            dim: self.dim,
            basis: self.basis,
            loc: Vec::with_capacity(idx.len() * self.dim),
            len: Vec::with_capacity(idx.len() * self.dim),
            len_sq: Vec::with_capacity(idx.len() * self.dim),
        };
        for &i in idx {
            let span = i * self.dim..(i + 1) * self.dim;
            out.loc.extend_from_slice(&self.loc[span.clone()]);
            out.len.extend_from_slice(&self.len[span.clone()]);
            out.len_sq.extend_from_slice(&self.len_sq[span]);
        }
        out
    }

    /// Contiguous range of points.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let span = start * self.dim..end * self.dim;
        Self {
            n: end - start,
            dim: self.dim,
            basis: self.basis,
            loc: self.loc[span.clone()].to_vec(),
            len: self.len[span.clone()].to_vec(),
            len_sq: self.len_sq[span].to_vec(),
        }
    }

    /// Per-dimension log-partials of entry `(i, j)` along `d`:
    /// (∂/∂x_{i,d}, ∂/∂log l_{i,d}, ∂/∂log l_{j,d}) of `log f_d`.
    #[inline]
    fn pair(&self, other: &Self, i: usize, j: usize, d: usize) -> (f64, f64, f64) {
        let a = i * self.dim + d;
        let b = j * other.dim + d;
        let r = self.loc[a] - other.loc[b];
        let (la2, lb2) = (self.len_sq[a], other.len_sq[b]);
        let s = la2 + lb2;
        let q = 2.0 * r * r / (s * s);
        (-2.0 * r / s, 0.5 - la2 / s + q * la2, 0.5 - lb2 / s + q * lb2)
    }
}

fn amplitude_power(r: &PreparedPoints, c: &PreparedPoints) -> i32 {
    (!r.basis) as i32 + (!c.basis) as i32
}

pub(crate) fn block_values(r: &PreparedPoints, c: &PreparedPoints, hyper: &KernelHyper) -> DMatrix<f64> {
    let amp = (amplitude_power(r, c) as f64 * hyper.log_amplitude).exp();
    let dim = r.dim;
    let mut out = DMatrix::zeros(r.n, c.n);
    for j in 0..c.n {
        let cl = &c.loc[j * dim..(j + 1) * dim];
        let cs = &c.len[j * dim..(j + 1) * dim];
        let cs2 = &c.len_sq[j * dim..(j + 1) * dim];
        let col = out.column_mut(j);
        for (i, slot) in col.into_iter().enumerate() {
            let rl = &r.loc[i * dim..(i + 1) * dim];
            let rs = &r.len[i * dim..(i + 1) * dim];
            let rs2 = &r.len_sq[i * dim..(i + 1) * dim];
            let (mut pref, mut expo) = (1.0, 0.0);
            for d in 0..dim {
                let s = rs2[d] + cs2[d];
                let dx = rl[d] - cl[d];
                pref *= 2.0 * rs[d] * cs[d] / s;
                expo += dx * dx / s;
            }
            *slot = amp * pref.sqrt() * (-expo).exp();
        }
    }
    out
}

/// Gradient of `Σ_ij G_ij K_ij` with respect to everything the block
/// depends on. Location and log-length partials are per point.
#[derive(Clone, Debug)]
pub(crate) struct BlockGradient {
    pub row_location: DMatrix<f64>,
    pub row_log_length: DMatrix<f64>,
    pub col_location: DMatrix<f64>,
    pub col_log_length: DMatrix<f64>,
    pub log_amplitude: f64,
    pub log_lengthscales: Vec<f64>,
}

/// Contract an adjoint matrix against the analytic partials of a block.
/// `values` must be `block_values(r, c, hyper)`. Cost Θ(D·|rows|·|cols|).
pub(crate) fn contract(
    r: &PreparedPoints,
    c: &PreparedPoints,
    values: &DMatrix<f64>,
    adjoint: &DMatrix<f64>,
) -> BlockGradient {
    let dim = r.dim;
    let mut row_location = DMatrix::zeros(r.n, dim);
    let mut row_log_length = DMatrix::zeros(r.n, dim);
    let mut col_location = DMatrix::zeros(c.n, dim);
    let mut col_log_length = DMatrix::zeros(c.n, dim);
    let mut total = 0.0;
    let mut scratch_loc = vec![0.0; dim];
    let mut scratch_len = vec![0.0; dim];
    for j in 0..c.n {
        scratch_loc.iter_mut().for_each(|v| *v = 0.0);
        scratch_len.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..r.n {
            let g = adjoint[(i, j)] * values[(i, j)];
            if g == 0.0 {
                continue;
            }
            total += g;
            for d in 0..dim {
                let (dx, da, db) = r.pair(c, i, j, d);
                row_location[(i, d)] += g * dx;
                row_log_length[(i, d)] += g * da;
                scratch_loc[d] -= g * dx;
                scratch_len[d] += g * db;
            }
        }
        for d in 0..dim {
            col_location[(j, d)] = scratch_loc[d];
            col_log_length[(j, d)] = scratch_len[d];
        }
    }
    let log_lengthscales = (0..dim)
        .map(|d| row_log_length.column(d).sum() + col_log_length.column(d).sum())
        .collect();
    BlockGradient {
        row_location,
        row_log_length,
        col_location,
        col_log_length,
        log_amplitude: amplitude_power(r, c) as f64 * total,
        log_lengthscales,
    }
}
