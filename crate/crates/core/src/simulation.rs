//! Synthetic functional tensors with known structure, comparison metrics and
//! a seeded benchmark harness.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{quadrature, trapezoid, CovarianceConfig, QuadratureRule};
use crate::cpd::{cpd_als, CpdConfig};
use crate::data::{sparsify, Dataset, LongitudinalSample, SparsifyMode};
use crate::error::{Error, Result};
use crate::inference::{predict_scores, reconstruct};
use crate::model::{fit, FitConfig};
use crate::smoothing::{regular_grid, DEFAULT_GRID_SIZE};
use crate::tensor::{khatri_rao_reversed, DenseTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub rank: usize,
    /// Tabular dimensions `p_1 … p_D`.
    pub dims: Vec<usize>,
    /// Observation times per sample, on a regular grid of the domain.
    pub k_times: usize,
    pub domain: (f64, f64),
    /// Fourier basis functions per component (or per entry when not low rank).
    pub basis_size: usize,
    /// Diagonal of Λ; `None` gives `R², …, 1`.
    pub lambda: Option<Vec<f64>>,
    pub sigma2: f64,
    /// Target RMS(signal)/σ; `None` leaves the signal unscaled.
    pub snr: Option<f64>,
    pub sparsity: f64,
    pub sparsify_mode: SparsifyMode,
    /// When false every entry of every sample is an independent random
    /// Fourier curve, with no low-rank structure.
    pub low_rank: bool,
    /// Nodes of the quadrature on which the true Φ is normalized.
    pub truth_grid: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            rank: 3,
            dims: vec![10],
            k_times: 30,
            domain: (0.0, 1.0),
            basis_size: 5,
            lambda: None,
            sigma2: 1.0,
            snr: Some(1.0),
            sparsity: 0.0,
            sparsify_mode: SparsifyMode::Entry,
            low_rank: true,
            truth_grid: DEFAULT_GRID_SIZE,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Named settings: `d2-r3`, `d3-r3` and `misspecified`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "d2-r3" => Ok(base),
            "d3-r3" => Ok(Self {
                dims: vec![5, 5],
                ..base
            }),
            "misspecified" => Ok(Self {
                dims: vec![8, 8],
                basis_size: 3,
                low_rank: false,
                ..base
            }),
            other => Err(Error::Invalid(format!(
                "unknown preset {other:?} (expected d2-r3, d3-r3 or misspecified)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n == 0 || self.rank == 0 || self.k_times < 2 || self.basis_size == 0 || self.truth_grid < 2 {
            return bad("n, rank, basis size must be positive and k_times, truth_grid at least 2".into());
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad(format!("invalid dims {:?}", self.dims));
        }
        if !(self.domain.0 < self.domain.1) {
            return bad(format!("invalid domain {:?}", self.domain));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad(format!("invalid noise variance {}", self.sigma2));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return bad(format!("sparsity {} must lie in [0, 1)", self.sparsity));
        }
        if let Some(s) = self.snr {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("invalid SNR {s}"));
            }
            if self.sigma2 == 0.0 {
                return bad("an SNR target needs positive noise variance".into());
            }
        }
        if let Some(l) = &self.lambda {
            if l.len() != self.rank || l.iter().any(|v| !(*v >= 0.0)) {
                return bad("Λ diagonal must have one non-negative value per component".into());
            }
        }
        Ok(())
    }

    pub fn lambda_diag(&self) -> Vec<f64> {
        self.lambda
            .clone()
            .unwrap_or_else(|| (0..self.rank).map(|r| ((self.rank - r) as f64).powi(2)).collect())
    }
}

/// `b_0 = 1`, `b_{2m−1} = √2 sin(2πmu)`, `b_{2m} = √2 cos(2πmu)` with `u`
/// the position of `t` in the domain rescaled to `[0, 1]`.
pub fn fourier_basis(m: usize, t: f64, domain: (f64, f64)) -> f64 {
    let u = (t - domain.0) / (domain.1 - domain.0);
    if m == 0 {
        return 1.0;
    }
    let freq = m.div_ceil(2) as f64;
    let arg = 2.0 * PI * freq * u;
    if m % 2 == 1 {
        2f64.sqrt() * arg.sin()
    } else {
        2f64.sqrt() * arg.cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Fourier coefficients of each normalized φ_r (`coefficients[r][m]`).
    pub coefficients: Vec<Vec<f64>>,
    pub quadrature: QuadratureRule,
    /// `G × R` on `quadrature`; empty when the data have no low-rank structure.
    pub phi: Vec<Vec<f64>>,
    pub factors: Vec<Vec<Vec<f64>>>,
    pub lambda: Vec<f64>,
    /// Unscaled scores, one row per sample.
    pub scores: Vec<Vec<f64>>,
    /// Multiplier applied to the signal to reach the SNR target.
    pub scale: f64,
    pub times: Vec<f64>,
    /// Noise-free values, `signal[i][k][j]`.
    pub signal: Vec<Vec<Vec<f64>>>,
    pub domain: (f64, f64),
}

impl GroundTruth {
    /// True Φ evaluated at arbitrary times, `len(times) × R`.
    pub fn phi_on(&self, times: &[f64]) -> DMatrix<f64> {
        let r = self.coefficients.len();
        DMatrix::from_fn(times.len(), r, |k, c| {
            self.coefficients[c]
                .iter()
                .enumerate()
                .map(|(m, b)| b * fourier_basis(m, times[k], self.domain))
                .sum()
        })
    }

    pub fn factor_matrices(&self) -> Vec<DMatrix<f64>> {
        self.factors
            .iter()
            .map(|rows| DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]))
            .collect()
    }

    pub fn is_low_rank(&self) -> bool {
        !self.coefficients.is_empty()
    }
}

/// Draws a dataset and the parameters that generated it.
pub fn generate(cfg: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let times = regular_grid(cfg.domain, cfg.k_times);
    let p: usize = cfg.dims.iter().product();
    let quad = quadrature(cfg.domain, cfg.truth_grid)?;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let mut truth = GroundTruth {
        coefficients: Vec::new(),
        quadrature: quad.clone(),
        phi: Vec::new(),
        factors: Vec::new(),
        lambda: Vec::new(),
        scores: Vec::new(),
        scale: 1.0,
        times: times.clone(),
        signal: Vec::new(),
        domain: cfg.domain,
    };
    let mut raw: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.n);
    if cfg.low_rank {
        for _ in 0..cfg.rank {
            let mut c: Vec<f64> = (0..cfg.basis_size).map(|_| normal(&mut rng)).collect();
            let vals: Vec<f64> = quad
                .nodes
                .iter()
                .map(|&t| c.iter().enumerate().map(|(m, b)| b * fourier_basis(m, t, cfg.domain)).sum())
                .collect();
            let sq: Vec<f64> = vals.iter().map(|v| v * v).collect();
            let norm = quad.integrate(&sq).sqrt();
            let first = vals.iter().find(|v| v.abs() > 1e-12 * norm).copied().unwrap_or(1.0);
            let s = first.signum() / norm;
            c.iter_mut().for_each(|b| *b *= s);
            truth.coefficients.push(c);
        }
        let factors: Vec<DMatrix<f64>> = cfg
            .dims
            .iter()
            .map(|&pd| {
                let mut a = DMatrix::from_fn(pd, cfg.rank, |_, _| rng.random::<f64>());
                for mut col in a.column_iter_mut() {
                    let n = col.norm();
                    col.unscale_mut(n);
                }
                a
            })
            .collect();
        let lambda = cfg.lambda_diag();
        let a_full = khatri_rao_reversed(&factors, None, cfg.rank);
        let phi_t = truth.phi_on(&times);
        let phi_q = truth.phi_on(&quad.nodes);
        for _ in 0..cfg.n {
            let u: Vec<f64> = lambda.iter().map(|l| l.sqrt() * normal(&mut rng)).collect();
            let slices = (0..cfg.k_times)
                .map(|k| {
                    (0..p)
                        .map(|j| (0..cfg.rank).map(|r| u[r] * phi_t[(k, r)] * a_full[(j, r)]).sum())
                        .collect()
                })
                .collect();
            raw.push(slices);
            truth.scores.push(u);
        }
        truth.phi = phi_q.row_iter().map(|r| r.iter().copied().collect()).collect();
        truth.factors = factors
            .iter()
            .map(|a| a.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect();
        truth.lambda = lambda;
    } else {
        for _ in 0..cfg.n {
            let coef: Vec<Vec<f64>> = (0..p)
                .map(|_| (0..cfg.basis_size).map(|_| normal(&mut rng)).collect())
                .collect();
            let slices = times
                .iter()
                .map(|&t| {
                    coef.iter()
                        .map(|c| c.iter().enumerate().map(|(m, b)| b * fourier_basis(m, t, cfg.domain)).sum())
                        .collect()
                })
                .collect();
            raw.push(slices);
        }
    }

    let sigma = cfg.sigma2.sqrt();
    if let Some(snr) = cfg.snr {
        let count = (cfg.n * cfg.k_times * p) as f64;
        let ms: f64 = raw.iter().flatten().flatten().map(|v| v * v).sum::<f64>() / count;
        if ms > 0.0 {
            truth.scale = snr * sigma / ms.sqrt();
        }
    }
    let c = truth.scale;
    let mut samples = Vec::with_capacity(cfg.n);
    for (i, slices) in raw.iter_mut().enumerate() {
        slices.iter_mut().flatten().for_each(|v| *v *= c);
        let noisy: Vec<Vec<f64>> = slices
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| if sigma > 0.0 { v + sigma * normal(&mut rng) } else { *v })
                    .collect()
            })
            .collect();
        samples.push(LongitudinalSample::dense(format!("s{:04}", i + 1), times.clone(), noisy)?);
    }
    truth.signal = raw;
    let d = Dataset::new(samples, cfg.dims.clone(), Some(cfg.domain))?;
    let d = sparsify(&d, cfg.sparsity, derive_seed(cfg.seed, 0x5eed, 0), cfg.sparsify_mode)?;
    Ok((d, truth))
}

/// Root mean squared difference over every sample, time and entry.
pub fn rmse(truth: &[Vec<Vec<f64>>], estimate: &[Vec<Vec<f64>>]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::Shape("sample counts differ".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in truth.iter().zip(estimate) {
        if a.len() != b.len() {
            return Err(Error::Shape("time counts differ".into()));
        }
        for (x, y) in a.iter().zip(b) {
            if x.len() != y.len() {
                return Err(Error::Shape("entry counts differ".into()));
            }
            sum += x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
            count += x.len();
        }
    }
    if count == 0 {
        return Err(Error::Invalid("nothing to compare".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// Largest principal angle between the column spans of `u` and `v`, both
/// sampled on the nodes of `quad`, under the quadrature inner product.
pub fn max_principal_angle(u: &DMatrix<f64>, v: &DMatrix<f64>, quad: &QuadratureRule) -> Result<f64> {
    let g = quad.len();
    if u.nrows() != g || v.nrows() != g {
        return Err(Error::Shape(format!("bases must have {g} rows")));
    }
    let root: Vec<f64> = quad.weights.iter().map(|w| w.sqrt()).collect();
    let orth = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let scaled = DMatrix::from_fn(g, m.ncols(), |i, j| root[i] * m[(i, j)]);
        let svd = scaled.svd(true, false);
        let top = svd.singular_values.max();
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > 1e-10 * top)
            .collect();
        if keep.len() < m.ncols() || top == 0.0 {
            return Err(Error::RankDeficient {
                context: "principal angle basis".into(),
                component: None,
            });
        }
        Ok(svd.u.expect("left vectors").select_columns(&keep))
    };
    let qu = orth(u)?;
    let qv = orth(v)?;
    let s = (qu.transpose() * qv).singular_values();
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0);
    Ok(smin.acos())
}

/// SplitMix64 mixing of a base seed with two stream indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LfParafac,
    Cpd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::LfParafac => "lf-parafac",
            Method::Cpd => "cpd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub cells: Vec<SimConfig>,
    pub repeats: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub covariance: CovarianceConfig,
    pub fit: FitConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            cells: vec![SimConfig::default()],
            repeats: 1,
            seed: 0,
            methods: vec![Method::LfParafac, Method::Cpd],
            covariance: CovarianceConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

/// Every combination of the given sparsities and SNRs on top of `base`.
pub fn benchmark_grid(base: &SimConfig, sparsities: &[f64], snrs: &[Option<f64>]) -> Vec<SimConfig> {
    let mut out = Vec::new();
    for &s in sparsities {
        for &snr in snrs {
            out.push(SimConfig {
                sparsity: s,
                snr,
                ..base.clone()
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    pub dims: String,
    pub rank: usize,
    pub sparsity: f64,
    pub snr: Option<f64>,
    pub repeat: usize,
    pub metric: String,
    pub value: f64,
    pub status: String,
}

pub const METRICS: [&str; 2] = ["rmse", "max_angle"];

/// Generates each cell `repeats` times and scores every method on it. A
/// method that cannot run yields explicit `failed` rows.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    for c in &cfg.cells {
        c.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.cells.len())
        .flat_map(|c| (0..cfg.repeats).map(move |r| (c, r)))
        .collect();
    let chunks: Vec<Vec<BenchmarkRow>> = jobs
        .par_iter()
        .map(|&(c, rep)| run_cell(cfg, c, rep))
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

fn run_cell(cfg: &BenchmarkConfig, cell: usize, repeat: usize) -> Result<Vec<BenchmarkRow>> {
    let sim = SimConfig {
        seed: derive_seed(cfg.seed, cell as u64 + 1, repeat as u64 + 1),
        ..cfg.cells[cell].clone()
    };
    let (d, truth) = generate(&sim)?;
    let dims = sim.dims.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("x");
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let outcome = match method {
            Method::LfParafac => score_lf_parafac(&d, &truth, sim.rank, cfg),
            Method::Cpd => score_cpd(&d, &truth, sim.rank, cfg.seed),
        };
        let values: Vec<(f64, &str)> = match outcome {
            Ok(v) => v
                .iter()
                .map(|m| match m {
                    Some(x) => (*x, "ok"),
                    None => (f64::NAN, "undefined"),
                })
                .collect(),
            Err(e) => {
                log::warn!("{} failed on cell {cell} repeat {repeat}: {e}", method.name());
                vec![(f64::NAN, "failed"); METRICS.len()]
            }
        };
        for (metric, (value, status)) in METRICS.iter().zip(values) {
            rows.push(BenchmarkRow {
                method: method.name().into(),
                dims: dims.clone(),
                rank: sim.rank,
                sparsity: sim.sparsity,
                snr: sim.snr,
                repeat,
                metric: (*metric).into(),
                value,
                status: status.into(),
            });
        }
    }
    Ok(rows)
}

/// RMSE on the sampling grid and, for low-rank truths, the Φ angle.
fn score_lf_parafac(d: &Dataset, truth: &GroundTruth, rank: usize, cfg: &BenchmarkConfig) -> Result<Vec<Option<f64>>> {
    let (model, _, _) = fit(d, rank, &cfg.covariance, &cfg.fit)?;
    let recon = d
        .samples()
        .iter()
        .map(|s| {
            let pred = predict_scores(&model, s)?;
            reconstruct(&model, &pred.u_hat, &truth.times)
        })
        .collect::<Result<Vec<_>>>()?;
    let err = rmse(&truth.signal, &recon)?;
    let angle = if truth.is_low_rank() {
        let q = &model.quadrature;
        Some(max_principal_angle(&model.phi, &truth.phi_on(&q.nodes), q)?)
    } else {
        None
    };
    Ok(vec![Some(err), angle])
}

/// CP decomposition of the `n × K × p_1 × … × p_D` array with each missing
/// value replaced by the cross-sample mean of its `(time, entry)` cell.
pub fn mean_imputed_tensor(d: &Dataset) -> Result<DenseTensor> {
    let n = d.n_samples();
    let times = d.samples()[0].times().to_vec();
    if d.samples().iter().any(|s| s.times() != times.as_slice()) {
        return Err(Error::Invalid("mean imputation needs a common time grid".into()));
    }
    let k = times.len();
    let p = d.n_entries();
    let mut means = vec![0.0; k * p];
    for kk in 0..k {
        for j in 0..p {
            let vals: Vec<f64> = d.samples().iter().filter_map(|s| s.value(kk, j)).collect();
            if vals.is_empty() {
                return Err(Error::Invalid(format!(
                    "no observation of entry {} at time {}",
                    d.entry_label(j),
                    times[kk]
                )));
            }
            means[kk * p + j] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
    }
    let mut shape = vec![n, k];
    shape.extend_from_slice(d.shape());
    let mut data = vec![0.0; n * k * p];
    for (i, s) in d.samples().iter().enumerate() {
        for kk in 0..k {
            for j in 0..p {
                data[i + n * (kk + k * j)] = s.value(kk, j).unwrap_or(means[kk * p + j]);
            }
        }
    }
    DenseTensor::new(shape, data)
}

fn score_cpd(d: &Dataset, truth: &GroundTruth, rank: usize, seed: u64) -> Result<Vec<Option<f64>>> {
    let t = mean_imputed_tensor(d)?;
    let fit = cpd_als(
        &t,
        rank,
        &CpdConfig {
            seed,
            ..CpdConfig::default()
        },
    )?;
    let rec = fit.reconstruct()?;
    let n = d.n_samples();
    let k = truth.times.len();
    let p = d.n_entries();
    let recon: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| {
            (0..k)
                .map(|kk| (0..p).map(|j| rec.data()[i + n * (kk + k * j)]).collect())
                .collect()
        })
        .collect();
    let err = rmse(&truth.signal, &recon)?;
    let angle = if truth.is_low_rank() {
        let q = trapezoid(truth.times.clone());
        Some(max_principal_angle(&fit.factors.factors()[1], &truth.phi_on(&q.nodes), &q)?)
    } else {
        None
    };
    Ok(vec![Some(err), angle])
}

pub fn write_benchmark_csv(rows: &[BenchmarkRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "dims", "rank", "sparsity", "snr", "repeat", "metric", "value", "status"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.dims.clone(),
            r.rank.to_string(),
            r.sparsity.to_string(),
            r.snr.map_or_else(|| "none".to_string(), |s| s.to_string()),
            r.repeat.to_string(),
            r.metric.clone(),
            r.value.to_string(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
