//! Online training: hyperparameter initialization on the first minibatch,
//! then per iteration sample a minibatch, grow the bases from it and take
//! one Adam ascent step on every parameter.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, DgpError, Result};
use crate::kernels::{BasisPoint, KernelHyper};
use crate::model::{elbo_gradient, DecoupledModel, EllMethod, KlSampling, ParamLayout, L_INIT};
use crate::optimizer::{AdamState, StepSchedule};

/// Pairs beyond this count are subsampled by the median heuristic.
pub const MEDIAN_PAIRS: usize = 2000;

const LENGTHSCALE_FLOOR: f64 = 1e-6;
const NOISE_FLOOR: f64 = 1e-8;
const NOISE_FALLBACK: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlColumns {
    Exact,
    /// Uniformly sampled columns of `K_α` per step, without replacement.
    Sampled(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub m_alpha_cap: usize,
    pub m_beta_cap: usize,
    pub batch_size: usize,
    /// Basis points added per iteration; `≤ batch_size`.
    pub increment: usize,
    pub iterations: usize,
    pub gamma0: f64,
    pub seed: u64,
    pub kl_columns: KlColumns,
    pub likelihood: EllMethod,
    /// Keep `α = β` by tying their parameters (the coupled special case).
    pub shared_bases: bool,
    pub optimize_hyper: bool,
    pub optimize_bases: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m_alpha_cap: 100,
            m_beta_cap: 10,
            batch_size: 64,
            increment: 8,
            iterations: 1000,
            gamma0: 0.01,
            seed: 0,
            kl_columns: KlColumns::Exact,
            likelihood: EllMethod::Gaussian,
            shared_bases: false,
            optimize_hyper: true,
            optimize_bases: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DgpError::InvalidArgument(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.increment > self.batch_size {
            return bad("increment must not exceed batch_size");
        }
        if !(self.gamma0 > 0.0) || !self.gamma0.is_finite() {
            return bad("gamma0 must be positive and finite");
        }
        if self.shared_bases && self.m_alpha_cap != self.m_beta_cap {
            return bad("shared bases need equal caps");
        }
        if let KlColumns::Sampled(0) = self.kl_columns {
            return bad("at least one KL column must be sampled");
        }
        if let EllMethod::MonteCarlo { n_samples: 0 } = self.likelihood {
            return bad("Monte-Carlo likelihood needs at least one sample");
        }
        Ok(())
    }
}

/// Affine statistics applied at ingestion: `x' = (x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × D`, one observation per row.
    pub inputs: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        check_dim(inputs.nrows(), targets.len())?;
        if inputs.nrows() == 0 {
            return Err(DgpError::InvalidArgument("dataset is empty".into()));
        }
        check_finite(inputs.as_slice(), "inputs")?;
        check_finite(targets.as_slice(), "targets")?;
        Ok(Self {
            inputs,
            targets,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        (self.inputs.select_rows(idx), self.targets.select_rows(idx))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let (x, y) = self.rows(idx);
        let mut d = Dataset::new(x, y)?;
        d.normalization = self.normalization.clone();
        Ok(d)
    }

    /// Z-score every input column; constant columns keep unit scale.
    pub fn normalize_inputs(&mut self) {
        let n = self.len() as f64;
        let mut stats = Normalization {
            input_mean: Vec::new(),
            input_std: Vec::new(),
        };
        for d in 0..self.dim() {
            let col = self.inputs.column(d);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            stats.input_mean.push(mean);
            stats.input_std.push(std);
        }
        self.apply_normalization(&stats);
        self.normalization = Some(stats);
    }

    /// Apply previously computed statistics (e.g. from a training split).
    pub fn apply_normalization(&mut self, stats: &Normalization) {
        for d in 0..self.dim() {
            let (m, s) = (stats.input_mean[d], stats.input_std[d]);
            self.inputs.column_mut(d).apply(|v| *v = (*v - m) / s);
        }
        self.normalization = Some(stats.clone());
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median heuristic: `s_d` is the median of `|x_id − x_jd|` over pairs
/// `i < j` (all pairs up to `MEDIAN_PAIRS`, otherwise that many sampled
/// uniformly), `ρ = 1`, `σ²` the sample variance of the targets.
///
/// A zero median falls back to 1; every `s_d ≥ 1e-6`. A target variance
/// at or below 1e-8 falls back to `σ² = 1e-4`.
pub fn init_hyper<R: Rng + ?Sized>(
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    rng: &mut R,
) -> Result<(KernelHyper, f64)> {
    let n = inputs.nrows();
    check_dim(n, targets.len())?;
    if n == 0 {
        return Err(DgpError::InvalidArgument("empty batch".into()));
    }
    let total = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total <= MEDIAN_PAIRS {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        (0..MEDIAN_PAIRS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i, j)
            })
            .collect()
    };
    let mut scales = Vec::with_capacity(inputs.ncols());
    for d in 0..inputs.ncols() {
        let mut diffs: Vec<f64> = pairs.iter().map(|&(i, j)| (inputs[(i, d)] - inputs[(j, d)]).abs()).collect();
        let m = if diffs.is_empty() { 0.0 } else { median(&mut diffs) };
        scales.push(if m > 0.0 { m.max(LENGTHSCALE_FLOOR) } else { 1.0 });
    }
    let mean = targets.mean();
    let var = if n > 1 {
        targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    let noise = if var > NOISE_FLOOR { var } else { NOISE_FALLBACK };
    Ok((KernelHyper::new(1.0, &scales)?, noise.ln()))
}

/// `n` distinct rows drawn uniformly.
pub fn sample_minibatch<R: Rng + ?Sized>(
    dataset: &Dataset,
    n: usize,
    rng: &mut R,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if n == 0 || n > dataset.len() {
        return Err(DgpError::InvalidArgument(format!(
            "minibatch size {n} outside 1..={}",
            dataset.len()
        )));
    }
    let idx = sample(rng, dataset.len(), n).into_vec();
    Ok(dataset.rows(&idx))
}

/// Append up to `increment` rows of `batch` to each basis, respecting the
/// caps. New mean coefficients are 0, new multipliers 1, and `L` grows by
/// `1e-3 · I`. Returns whether the model changed.
pub fn add_basis(model: &mut DecoupledModel, batch: &DMatrix<f64>, config: &TrainConfig) -> Result<bool> {
    check_dim(model.dim(), batch.ncols())?;
    let avail = config.increment.min(batch.nrows());
    let add_a = avail.min(config.m_alpha_cap.saturating_sub(model.m_alpha()));
    let add_b = avail.min(config.m_beta_cap.saturating_sub(model.m_beta()));
    let point = |i: usize| BasisPoint::at(&batch.row(i).iter().copied().collect::<Vec<_>>());
    if add_a > 0 {
        let ma = model.m_alpha();
        model.alpha.extend((0..add_a).map(point));
        model.a = model.a.clone().resize_vertically(ma + add_a, 0.0);
    }
    if add_b > 0 {
        let mb = model.m_beta();
        model.beta.extend((0..add_b).map(point));
        let mut l = model.l.clone().resize(mb + add_b, mb + add_b, 0.0);
        for i in mb..mb + add_b {
            l[(i, i)] = L_INIT;
        }
        model.l = l;
    }
    Ok(add_a + add_b > 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Minibatch ELBO estimate before the step.
    pub elbo: f64,
    pub wall_ms: f64,
    pub step_accepted: bool,
}

/// Step-by-step driver; `train` runs it to completion.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    config: TrainConfig,
    rng: ChaCha8Rng,
    schedule: StepSchedule,
    model: DecoupledModel,
    adam: AdamState,
    first_batch: Option<(DMatrix<f64>, DVector<f64>)>,
    iteration: usize,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.batch_size > dataset.len() {
            return Err(DgpError::InvalidArgument(format!(
                "batch_size {} exceeds dataset size {}",
                config.batch_size,
                dataset.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let first = sample_minibatch(dataset, config.batch_size, &mut rng)?;
        let (hyper, log_noise) = init_hyper(&first.0, &first.1, &mut rng)?;
        let model = DecoupledModel::empty(hyper, log_noise);
        let adam = AdamState::new(model.layout().len());
        Ok(Self {
            dataset,
            schedule: StepSchedule::new(config.gamma0)?,
            config,
            rng,
            model,
            adam,
            first_batch: Some(first),
            iteration: 0,
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &DecoupledModel {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn into_model(self) -> DecoupledModel {
        self.model
    }

    pub fn step(&mut self) -> Result<TraceEntry> {
        let (x, y) = match self.first_batch.take() {
            Some(b) => b,
            None => sample_minibatch(self.dataset, self.config.batch_size, &mut self.rng)?,
        };
        let before: ParamLayout = self.model.layout();
        if add_basis(&mut self.model, &x, &self.config)? {
            self.adam.remap(&before, &self.model.layout())?;
        }
        let sampling = match self.config.kl_columns {
            KlColumns::Sampled(n) if n < self.model.m_alpha() => {
                let idx = sample(&mut self.rng, self.model.m_alpha(), n).into_vec();
                KlSampling::columns(idx, self.model.m_alpha())
            }
            _ => KlSampling::Exact,
        };
        let (value, grad) = elbo_gradient(
            &self.model,
            &x,
            &y,
            self.dataset.len(),
            &sampling,
            self.config.likelihood,
            &mut self.rng,
        )?;
        let mut g = grad.to_flat();
        self.mask(&mut g);
        let mut params = self.model.to_flat();
        let rate = self.schedule.rate(self.iteration as u64);
        let accepted = match self.adam.step(&mut params, &g, rate) {
            Ok(()) => {
                self.model.set_flat(&params)?;
                true
            }
            Err(e) => {
                log::warn!("iteration {}: step rejected: {e}", self.iteration);
                false
            }
        };
        let entry = TraceEntry {
            iteration: self.iteration,
            elbo: value,
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
            step_accepted: accepted,
        };
        self.iteration += 1;
        Ok(entry)
    }

    /// Zero frozen parameter groups and tie `α`/`β` under shared bases.
    fn mask(&self, g: &mut [f64]) {
        let l = self.model.layout();
        let (ma, mb, d) = (l.m_alpha, l.m_beta, l.dim);
        let alpha_geo = ma..ma + 2 * ma * d;
        let beta_start = ma + 2 * ma * d + mb * mb;
        let beta_geo = beta_start..beta_start + 2 * mb * d;
        let hyper = beta_geo.end..g.len();
        if self.config.shared_bases {
            for (i, j) in alpha_geo.clone().zip(beta_geo.clone()) {
                let s = g[i] + g[j];
                g[i] = s;
                g[j] = s;
            }
        }
        if !self.config.optimize_bases {
            g[alpha_geo].fill(0.0);
            g[beta_geo].fill(0.0);
        }
        if !self.config.optimize_hyper {
            g[hyper].fill(0.0);
        }
    }
}

/// Run every configured iteration and return the final model and trace.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(DecoupledModel, Vec<TraceEntry>)> {
    let mut t = Trainer::new(dataset, config.clone())?;
    let mut trace = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        trace.push(t.step()?);
    }
    Ok((t.into_model(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{elbo, predict};
    use approx::assert_abs_diff_eq;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0f64..3.0));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + 0.1 * rng.random_range(-1.0..1.0));
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn init_hyper_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let (h, _) = init_hyper(&x, &DVector::from_column_slice(&[0.0, 1.0, 3.0]), &mut rng).unwrap();
        assert_eq!(h.lengthscales(), vec![1.0]);
        assert_eq!(h.amplitude(), 1.0);

        let x = DMatrix::from_element(4, 2, 3.5);
        let (h, noise) = init_hyper(&x, &DVector::from_element(4, 1.0), &mut rng).unwrap();
        assert_eq!(h.lengthscales(), vec![1.0, 1.0]);
        assert_abs_diff_eq!(noise.exp(), 1e-4, epsilon = 1e-18);

        let y = DVector::from_column_slice(&[1.0, 2.0, 4.0]);
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let (_, noise) = init_hyper(&x, &y, &mut rng).unwrap();
        assert_abs_diff_eq!(noise.exp(), 7.0 / 3.0, epsilon = 1e-12);

        assert!(init_hyper(&DMatrix::zeros(0, 1), &DVector::zeros(0), &mut rng).is_err());
    }

    #[test]
    fn init_hyper_subsamples_large_batches() {
        let d = toy(200, 1);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = init_hyper(&d.inputs, &d.targets, &mut r1).unwrap();
        let b = init_hyper(&d.inputs, &d.targets, &mut r2).unwrap();
        assert_eq!(a, b);
        // median |U − U'| for U uniform on a width-6 interval is 6(1 − 1/√2)
        assert!((a.0.lengthscales()[0] - 6.0 * (1.0 - 0.5f64.sqrt())).abs() < 0.3);
    }

    #[test]
    fn add_basis_from_empty() {
        let cfg = TrainConfig {
            m_alpha_cap: 100,
            m_beta_cap: 10,
            increment: 3,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let mut m = DecoupledModel::empty(KernelHyper::new(1.0, &[1.0]).unwrap(), 0.0);
        let batch = DMatrix::from_column_slice(5, 1, &[0.1, 0.2, 0.3, 0.4, 0.5]);
        assert!(add_basis(&mut m, &batch, &cfg).unwrap());
        assert_eq!((m.m_alpha(), m.m_beta()), (3, 3));
        assert!(m.a.iter().all(|v| *v == 0.0));
        assert_eq!(m.l, DMatrix::identity(3, 3) * L_INIT);
        assert_eq!(m.alpha, m.beta);
        assert!(m.alpha.iter().all(|b| b.log_multipliers == vec![0.0]));
    }

    #[test]
    fn add_basis_saturates_and_preserves_predictions() {
        let cfg = TrainConfig {
            m_alpha_cap: 4,
            m_beta_cap: 2,
            increment: 3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut m = DecoupledModel::empty(KernelHyper::new(1.0, &[1.0]).unwrap(), 0.0);
        let batch = DMatrix::from_column_slice(3, 1, &[0.1, -0.7, 1.3]);
        add_basis(&mut m, &batch, &cfg).unwrap();
        m.a[0] = 0.4;
        m.a[2] = -1.1;
        let q = DMatrix::from_column_slice(4, 1, &[-1.0, 0.0, 0.5, 2.0]);
        let before = predict(&m, &q).unwrap();
        assert!(add_basis(&mut m, &batch, &cfg).unwrap());
        assert_eq!((m.m_alpha(), m.m_beta()), (4, 2));
        let after = predict(&m, &q).unwrap();
        assert_eq!(before.mean, after.mean);
        assert_eq!(before.variance, after.variance);
        let snapshot = m.clone();
        assert!(!add_basis(&mut m, &batch, &cfg).unwrap());
        assert_eq!(m, snapshot);
    }

    #[test]
    fn new_covariance_basis_barely_moves_the_variance() {
        let cfg = TrainConfig {
            m_alpha_cap: 10,
            m_beta_cap: 10,
            increment: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut m = DecoupledModel::empty(KernelHyper::new(1.0, &[1.0]).unwrap(), 0.0);
        let q = DMatrix::from_column_slice(3, 1, &[-0.5, 0.0, 0.9]);
        let before = predict(&m, &q).unwrap();
        add_basis(&mut m, &DMatrix::from_column_slice(2, 1, &[0.0, 0.5]), &cfg).unwrap();
        let after = predict(&m, &q).unwrap();
        for i in 0..3 {
            assert!((before.variance[i] - after.variance[i]).abs() <= 1e-4 * before.variance[i]);
        }
    }

    #[test]
    fn minibatch_sampling() {
        let d = toy(10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, _) = sample_minibatch(&d, 10, &mut rng).unwrap();
        let mut got: Vec<f64> = x.iter().copied().collect();
        let mut want: Vec<f64> = d.inputs.iter().copied().collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);

        let a = sample_minibatch(&d, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = sample_minibatch(&d, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert!(sample_minibatch(&d, 11, &mut rng).is_err());

        let idx = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let d = Dataset::new(idx, DVector::zeros(10)).unwrap();
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let (x, _) = sample_minibatch(&d, 1, &mut rng).unwrap();
            counts[x[(0, 0)] as usize] += 1;
        }
        assert!(counts.iter().all(|c| (850..=1150).contains(c)), "{counts:?}");
    }

    #[test]
    fn zero_iterations_return_the_initial_model() {
        let d = toy(30, 4);
        let cfg = TrainConfig {
            iterations: 0,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let (m, trace) = train(&d, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!((m.m_alpha(), m.m_beta()), (0, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (x, y) = sample_minibatch(&d, 10, &mut rng).unwrap();
        let (h, noise) = init_hyper(&x, &y, &mut rng).unwrap();
        assert_eq!(m.hyper, h);
        assert_eq!(m.log_noise, noise);
    }

    #[test]
    fn training_is_deterministic_and_bases_grow_monotonically() {
        let d = toy(80, 5);
        let cfg = TrainConfig {
            m_alpha_cap: 20,
            m_beta_cap: 6,
            batch_size: 16,
            increment: 4,
            iterations: 30,
            kl_columns: KlColumns::Sampled(5),
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&d, cfg.clone()).unwrap();
        let mut sizes = Vec::new();
        for _ in 0..30 {
            t.step().unwrap();
            sizes.push((t.model().m_alpha(), t.model().m_beta()));
        }
        for w in sizes.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        assert_eq!(*sizes.last().unwrap(), (20, 6));
        let (a, ta) = train(&d, &cfg).unwrap();
        let (b, tb) = train(&d, &cfg).unwrap();
        assert_eq!(a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let e = |t: &[TraceEntry]| t.iter().map(|e| e.elbo.to_bits()).collect::<Vec<_>>();
        assert_eq!(e(&ta), e(&tb));
        assert_eq!(a, t.into_model());
    }

    #[test]
    fn shared_bases_stay_identical() {
        let d = toy(60, 6);
        let cfg = TrainConfig {
            m_alpha_cap: 8,
            m_beta_cap: 8,
            batch_size: 12,
            increment: 3,
            iterations: 25,
            shared_bases: true,
            ..TrainConfig::default()
        };
        let (m, _) = train(&d, &cfg).unwrap();
        assert!(m.is_coupled());
        assert_eq!(m.m_alpha(), 8);
    }

    #[test]
    fn full_batch_vlb_does_not_decrease() {
        let d = toy(40, 7);
        let cfg = TrainConfig {
            m_alpha_cap: 15,
            m_beta_cap: 5,
            batch_size: 40,
            increment: 40,
            iterations: 500,
            gamma0: 0.005,
            optimize_hyper: false,
            optimize_bases: false,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&d, cfg).unwrap();
        let mut vlb = Vec::new();
        for i in 0..500 {
            t.step().unwrap();
            if (i + 1) % 50 == 0 {
                vlb.push(elbo(t.model(), &d.inputs, &d.targets, d.len()).unwrap());
            }
        }
        for w in vlb.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{vlb:?}");
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { increment: 100, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { gamma0: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { shared_bases: true, ..ok.clone() }.validate().is_err());
        let d = toy(5, 1);
        assert!(Trainer::new(&d, TrainConfig { batch_size: 6, increment: 1, ..ok }).is_err());
    }

    #[test]
    fn normalization_roundtrip_statistics() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let mut d = Dataset::new(x, DVector::zeros(3)).unwrap();
        d.normalize_inputs();
        let s = d.normalization.clone().unwrap();
        assert_eq!(s.input_mean, vec![2.0, 5.0]);
        assert_eq!(s.input_std[1], 1.0);
        assert_abs_diff_eq!(d.inputs.column(0).sum(), 0.0, epsilon = 1e-15);
        assert!(d.inputs.column(1).iter().all(|v| *v == 0.0));
    }
}
