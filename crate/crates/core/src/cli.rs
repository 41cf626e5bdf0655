//! Data ingestion, evaluation metrics, run reports and the `dgp` command.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};
use crate::kernels::{BasisPoint, KernelHyper};
use crate::model::{elbo, ell_gaussian, kl_normal_prior, predict, DecoupledModel, EllMethod, PredictiveMoments};
use crate::oracles::{exact_gpr, log_marginal};
use crate::trainer::{init_hyper, Dataset, KlColumns, Normalization, TrainConfig, TraceEntry, Trainer};

/// Which column of a CSV file holds the regression target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetColumn {
    Last,
    Name(String),
    Index(usize),
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(s.to_string()),
        })
    }
}

/// Read a comma-separated file with a header row. Every other column is
/// an input. Non-numeric or non-finite cells are reported with their
/// 1-based line number.
pub fn load_csv(path: &Path, target: &TargetColumn, normalize: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let width = headers.len();
    if width < 2 {
        return Err(DgpError::InvalidArgument(format!(
            "{}: need at least one input and one target column",
            path.display()
        )));
    }
    let t = match target {
        TargetColumn::Last => width - 1,
        TargetColumn::Index(i) if *i < width => *i,
        TargetColumn::Index(i) => {
            return Err(DgpError::InvalidArgument(format!("target column {i} out of range")))
        }
        TargetColumn::Name(n) => headers
            .iter()
            .position(|h| h.trim() == n)
            .ok_or_else(|| DgpError::InvalidArgument(format!("no column named {n:?}")))?,
    };
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(row + 2, |p| p.line() as usize);
        let malformed = |message: String| DgpError::MalformedRow {
            path: path.display().to_string(),
            line,
            message,
        };
        if record.len() != width {
            return Err(malformed(format!("expected {width} fields, found {}", record.len())));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| malformed(format!("column {j}: {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(malformed(format!("column {j}: non-finite value {cell:?}")));
            }
            if j == t {
                targets.push(v);
            } else {
                inputs.push(v);
            }
        }
    }
    if targets.is_empty() {
        return Err(DgpError::InvalidArgument(format!("{}: no data rows", path.display())));
    }
    let x = DMatrix::from_row_slice(targets.len(), width - 1, &inputs);
    let mut d = Dataset::new(x, DVector::from_vec(targets))?;
    if normalize {
        d.normalize_inputs();
    }
    Ok(d)
}

/// Inverse of `load_csv` with the target as the last column.
pub fn write_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|d| format!("x{}", d + 1)).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset.inputs.row(i).iter().map(|v| v.to_string()).collect();
        row.push(dataset.targets[i].to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `sin(πx) / (πx)`, with value 1 at 0.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// `n` noisy sinc observations with inputs uniform on `[−5, 5]`.
pub fn sinc_dataset(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| DgpError::InvalidArgument(e.to_string()))?;
    let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-5.0..=5.0));
    let y = DVector::from_fn(n, |i, _| sinc(x[(i, 0)]) + noise.sample(&mut rng));
    Dataset::new(x, y)
}

/// Random split into `(train, test)` with `round(frac · N)` test rows.
pub fn split(dataset: &Dataset, test_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(DgpError::InvalidArgument("test fraction must lie in (0, 1)".into()));
    }
    let n = dataset.len();
    let n_test = ((test_frac * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n_test >= n {
        return Err(DgpError::InvalidArgument("dataset too small to split".into()));
    }
    let perm = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, n).into_vec();
    Ok((dataset.subset(&perm[n_test..])?, dataset.subset(&perm[..n_test])?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub test_nmse: f64,
    pub test_vlb: f64,
    pub train_vlb: f64,
}

/// `mean((y − m̂)²) / var(y)` with the population variance.
pub fn nmse(predicted: &DVector<f64>, targets: &DVector<f64>) -> Result<f64> {
    crate::error::check_dim(targets.len(), predicted.len())?;
    if targets.is_empty() {
        return Err(DgpError::InvalidArgument("empty test set".into()));
    }
    let n = targets.len() as f64;
    let mean = targets.mean();
    let var = targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(DgpError::InvalidArgument("test targets have zero variance".into()));
    }
    let mse = targets.iter().zip(predicted.iter()).map(|(y, m)| (y - m) * (y - m)).sum::<f64>() / n;
    Ok(mse / var)
}

/// `(nMSE, Σ_test E_q[log p(y | f)] − KL(q ‖ p))`.
pub fn evaluate(model: &DecoupledModel, test: &Dataset) -> Result<(f64, f64)> {
    let p = predict(model, &test.inputs)?;
    let e = nmse(&p.mean, &test.targets)?;
    let vlb = ell_gaussian(&p, &test.targets, model.log_noise)? - kl_normal_prior(model)?;
    Ok((e, vlb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub m_alpha: usize,
    pub m_beta: usize,
    pub amplitude: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl ModelSummary {
    fn of(m: &DecoupledModel) -> Self {
        Self {
            m_alpha: m.m_alpha(),
            m_beta: m.m_beta(),
            amplitude: m.hyper.amplitude(),
            lengthscales: m.hyper.lengthscales(),
            noise_variance: m.noise_variance(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub algo: Algo,
    pub data: String,
    pub n_train: usize,
    pub n_test: usize,
    pub test_frac: f64,
    pub normalize: bool,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub trace: Vec<TraceEntry>,
    pub metrics: Metrics,
    pub model: ModelSummary,
    pub wall_ms: f64,
}

/// A complete trained model as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub alpha: Vec<BasisPoint>,
    pub a: Vec<f64>,
    pub beta: Vec<BasisPoint>,
    /// `M_β × M_β`, row-major.
    pub l: Vec<f64>,
    pub hyper: KernelHyper,
    pub log_noise: f64,
    pub normalization: Option<Normalization>,
}

impl ModelSnapshot {
    pub fn new(model: &DecoupledModel, normalization: Option<Normalization>) -> Self {
        let mb = model.m_beta();
        Self {
            alpha: model.alpha.clone(),
            a: model.a.iter().copied().collect(),
            beta: model.beta.clone(),
            l: (0..mb).flat_map(|i| (0..mb).map(move |j| (i, j))).map(|ij| model.l[ij]).collect(),
            hyper: model.hyper.clone(),
            log_noise: model.log_noise,
            normalization,
        }
    }

    pub fn to_model(&self) -> Result<DecoupledModel> {
        let mb = self.beta.len();
        crate::error::check_dim(mb * mb, self.l.len())?;
        let m = DecoupledModel {
            alpha: self.alpha.clone(),
            a: DVector::from_column_slice(&self.a),
            beta: self.beta.clone(),
            l: DMatrix::from_row_slice(mb, mb, &self.l),
            hyper: self.hyper.clone(),
            log_noise: self.log_noise,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Evenly spaced grid over `[lo, hi]` with columns `x, mean, mean ∓ 2√ŝ`.
pub fn write_plot_grid(
    path: &Path,
    lo: f64,
    hi: f64,
    points: usize,
    norm: Option<&Normalization>,
    predictor: impl Fn(&DMatrix<f64>) -> Result<PredictiveMoments>,
) -> Result<()> {
    let step = if points > 1 { (hi - lo) / (points - 1) as f64 } else { 0.0 };
    let xs: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    let q = DMatrix::from_fn(points, 1, |i, _| match norm {
        Some(n) => (xs[i] - n.input_mean[0]) / n.input_std[0],
        None => xs[i],
    });
    let p = predictor(&q)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "mean", "lo", "hi"])?;
    for i in 0..points {
        let half = 2.0 * p.variance[i].max(0.0).sqrt();
        let m = p.mean[i];
        w.write_record(&[xs[i].to_string(), m.to_string(), (m - half).to_string(), (m + half).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Decoupled,
    Coupled,
    Exact,
}

fn parse_kl_cols(s: &str) -> std::result::Result<KlColumns, String> {
    if s == "exact" {
        return Ok(KlColumns::Exact);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(KlColumns::Sampled(n)),
        _ => Err(format!("expected \"exact\" or a positive count, got {s:?}")),
    }
}

/// Train and evaluate a decoupled Gaussian-process regressor.
#[derive(Parser, Debug, Clone)]
#[command(name = "dgp", version)]
pub struct Cli {
    /// CSV file with a header row.
    #[arg(long, conflicts_with = "sinc", required_unless_present = "sinc")]
    pub data: Option<PathBuf>,
    /// Generate this many noisy sinc observations instead of reading a file.
    #[arg(long)]
    pub sinc: Option<usize>,
    /// Standard deviation of the sinc observation noise.
    #[arg(long, default_value_t = 0.1)]
    pub sinc_noise: f64,
    /// Target column, by header name or 0-based index (default: last).
    #[arg(long)]
    pub target_col: Option<TargetColumn>,
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    /// Z-score the inputs with training-split statistics.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 100)]
    pub m_alpha: usize,
    #[arg(long, default_value_t = 10)]
    pub m_beta: usize,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 8)]
    pub increment: usize,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Algo::Decoupled)]
    pub algo: Algo,
    /// `exact` or the number of sampled columns of `K_α` per step.
    #[arg(long, default_value = "exact", value_parser = parse_kl_cols)]
    pub kl_cols: KlColumns,
    /// Use a Monte-Carlo expected log-likelihood with this many samples.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write `x,mean,lo,hi` plot data (1-D inputs only).
    #[arg(long)]
    pub plot_grid: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub plot_points: usize,
    /// Write the trained model as JSON.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] DgpError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

fn usage(e: DgpError) -> CliError {
    CliError::Usage(e.to_string())
}

impl Cli {
    pub fn train_config(&self) -> std::result::Result<TrainConfig, CliError> {
        let coupled = self.algo == Algo::Coupled;
        let cfg = TrainConfig {
            m_alpha_cap: self.m_alpha,
            m_beta_cap: if coupled { self.m_alpha } else { self.m_beta },
            batch_size: self.batch,
            increment: self.increment,
            iterations: self.iters,
            gamma0: self.lr,
            seed: self.seed,
            kl_columns: self.kl_cols,
            likelihood: match self.mc_samples {
                Some(n) => EllMethod::MonteCarlo { n_samples: n },
                None => EllMethod::Gaussian,
            },
            shared_bases: coupled,
            optimize_hyper: true,
            optimize_bases: true,
        };
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }

    fn load(&self) -> std::result::Result<(Dataset, String), CliError> {
        match (&self.data, self.sinc) {
            (Some(p), _) => {
                let target = self.target_col.clone().unwrap_or(TargetColumn::Last);
                Ok((load_csv(p, &target, false)?, p.display().to_string()))
            }
            (None, Some(n)) => Ok((
                sinc_dataset(n, self.sinc_noise, self.seed).map_err(usage)?,
                format!("sinc:{n}"),
            )),
            (None, None) => Err(CliError::Usage("one of --data or --sinc is required".into())),
        }
    }
}

/// Execute one run described by `cli` and return its report.
pub fn run(cli: &Cli) -> std::result::Result<RunReport, CliError> {
    let started = Instant::now();
    let config = cli.train_config()?;
    let (data, source) = cli.load()?;
    let (mut train, mut test) = split(&data, cli.test_frac, cli.seed).map_err(usage)?;
    if cli.normalize {
        train.normalize_inputs();
        let stats = train.normalization.clone().expect("just normalized");
        test.apply_normalization(&stats);
    }
    if config.batch_size > train.len() {
        return Err(CliError::Usage(format!(
            "--batch {} exceeds the {} training rows",
            config.batch_size,
            train.len()
        )));
    }
    let echo = ConfigEcho {
        algo: cli.algo,
        data: source,
        n_train: train.len(),
        n_test: test.len(),
        test_frac: cli.test_frac,
        normalize: cli.normalize,
        train: config.clone(),
    };

    let (trace, metrics, summary, model) = if cli.algo == Algo::Exact {
        let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
        let (hyper, log_noise) = init_hyper(&train.inputs, &train.targets, &mut rng)?;
        let p = exact_gpr(&train.inputs, &train.targets, &hyper, log_noise, &test.inputs)?;
        let metrics = Metrics {
            test_nmse: nmse(&p.mean, &test.targets)?,
            test_vlb: ell_gaussian(&p, &test.targets, log_noise)?,
            train_vlb: log_marginal(&train.inputs, &train.targets, &hyper, log_noise)?,
        };
        let summary = ModelSummary {
            m_alpha: train.len(),
            m_beta: train.len(),
            amplitude: hyper.amplitude(),
            lengthscales: hyper.lengthscales(),
            noise_variance: log_noise.exp(),
        };
        if let Some(path) = &cli.plot_grid {
            let (lo, hi) = input_range(&data)?;
            write_plot_grid(path, lo, hi, cli.plot_points, train.normalization.as_ref(), |q| {
                exact_gpr(&train.inputs, &train.targets, &hyper, log_noise, q)
            })?;
        }
        (Vec::new(), metrics, summary, None)
    } else {
        let mut trainer = Trainer::new(&train, config.clone())?;
        let mut trace = Vec::with_capacity(config.iterations);
        for _ in 0..config.iterations {
            trace.push(trainer.step()?);
        }
        let model = trainer.into_model();
        let (test_nmse, test_vlb) = evaluate(&model, &test)?;
        let metrics = Metrics {
            test_nmse,
            test_vlb,
            train_vlb: elbo(&model, &train.inputs, &train.targets, train.len())?,
        };
        if let Some(path) = &cli.plot_grid {
            let (lo, hi) = input_range(&data)?;
            write_plot_grid(path, lo, hi, cli.plot_points, train.normalization.as_ref(), |q| {
                predict(&model, q)
            })?;
        }
        (trace, metrics, ModelSummary::of(&model), Some(model))
    };
    if [metrics.test_nmse, metrics.test_vlb, metrics.train_vlb].iter().any(|v| !v.is_finite()) {
        return Err(DgpError::NonFinite("final metrics".into()).into());
    }
    if let (Some(path), Some(m)) = (&cli.model_out, &model) {
        let snap = ModelSnapshot::new(m, train.normalization.clone());
        serde_json::to_writer_pretty(File::create(path).map_err(DgpError::from)?, &snap).map_err(DgpError::from)?;
    }
    Ok(RunReport {
        config: echo,
        trace,
        metrics,
        model: summary,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn input_range(d: &Dataset) -> Result<(f64, f64)> {
    if d.dim() != 1 {
        return Err(DgpError::InvalidArgument("plot data needs one-dimensional inputs".into()));
    }
    let col = d.inputs.column(0);
    Ok((col.min(), col.max()))
}

/// Write `report` as pretty JSON to `path`, or stdout when `None`.
pub fn write_report(report: &RunReport, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn nmse_definition() {
        let y = DVector::from_column_slice(&[1.0, 2.0, 4.0, -1.0]);
        assert_eq!(nmse(&y, &y).unwrap(), 0.0);
        let flat = DVector::from_element(4, y.mean());
        assert_abs_diff_eq!(nmse(&flat, &y).unwrap(), 1.0, epsilon = 1e-15);
        let p = DVector::from_column_slice(&[1.5, 2.0, 3.0, 0.0]);
        // mse = (0.25 + 0 + 1 + 1) / 4, var = (0.25 + 0.25 + 6.25 + 6.25) / 4
        assert_abs_diff_eq!(nmse(&p, &y).unwrap(), 2.25 / 13.0, epsilon = 1e-15);
        assert!(nmse(&y, &DVector::from_element(4, 3.0)).is_err());
    }

    #[test]
    fn evaluate_ignores_row_order() {
        let d = sinc_dataset(30, 0.1, 1).unwrap();
        let cfg = TrainConfig {
            m_alpha_cap: 10,
            m_beta_cap: 3,
            batch_size: 10,
            increment: 5,
            iterations: 5,
            ..TrainConfig::default()
        };
        let (m, _) = crate::trainer::train(&d, &cfg).unwrap();
        let rev: Vec<usize> = (0..30).rev().collect();
        let (a, b) = (evaluate(&m, &d).unwrap(), evaluate(&m, &d.subset(&rev).unwrap()).unwrap());
        assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-9);
    }

    #[test]
    fn sinc_values() {
        assert_eq!(sinc(0.0), 1.0);
        assert_abs_diff_eq!(sinc(1.0), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sinc(0.5), 2.0 / std::f64::consts::PI, epsilon = 1e-15);
    }

    #[test]
    fn split_partitions_the_rows() {
        let d = sinc_dataset(50, 0.1, 2).unwrap();
        let (tr, te) = split(&d, 0.2, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (40, 10));
        let mut all: Vec<f64> = tr.inputs.iter().chain(te.inputs.iter()).copied().collect();
        let mut want: Vec<f64> = d.inputs.iter().copied().collect();
        all.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        assert_eq!(all, want);
        assert!(split(&d, 0.0, 3).is_err());
    }

    #[test]
    fn kl_cols_parsing() {
        assert_eq!(parse_kl_cols("exact"), Ok(KlColumns::Exact));
        assert_eq!(parse_kl_cols("16"), Ok(KlColumns::Sampled(16)));
        assert!(parse_kl_cols("0").is_err());
        assert!(parse_kl_cols("many").is_err());
    }
}
