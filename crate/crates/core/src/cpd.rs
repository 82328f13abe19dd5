//! Alternating least squares CP decomposition, used as the comparison
//! baseline and to initialize the functional solver.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariance::QuadratureRule;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::solve_right_sym;
use crate::smoothing::{default_bandwidth, local_linear_1d, MeanField, Point1};
use crate::tensor::{khatri_rao_reversed, matricize, DenseTensor, FactorSet};

#[derive(Debug, Clone)]
pub struct CpdFit {
    /// Unit-norm factor columns.
    pub factors: FactorSet,
    pub weights: Vec<f64>,
    /// Squared residual norm after each sweep.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl CpdFit {
    pub fn reconstruct(&self) -> Result<DenseTensor> {
        crate::tensor::cp_reconstruct(&self.factors, Some(&self.weights))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpdConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for CpdConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-10,
            seed: 0,
        }
    }
}

/// Leading left singular vectors of each unfolding, with seeded Gaussian
/// columns where the mode has fewer than `rank` of them.
fn initial_factors(t: &DenseTensor, rank: usize, seed: u64) -> Result<Vec<DMatrix<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(t.order());
    for d in 0..t.order() {
        let pd = t.shape()[d];
        let mut a = DMatrix::<f64>::from_fn(pd, rank, |_, _| StandardNormal.sample(&mut rng));
        let x = matricize(t, d)?;
        let gram = &x * x.transpose();
        let eig = nalgebra::SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..pd).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (r, &e) in order.iter().take(rank).enumerate() {
            if eig.eigenvalues[e] > 0.0 {
                a.set_column(r, &eig.eigenvectors.column(e));
            }
        }
        out.push(a);
    }
    Ok(out)
}

/// ALS on the matricized normal equations. Columns are normalized after
/// every mode update with the scale carried in the weights.
pub fn cpd_als(t: &DenseTensor, rank: usize, cfg: &CpdConfig) -> Result<CpdFit> {
    if rank == 0 {
        return Err(Error::Invalid("rank must be at least 1".into()));
    }
    let order = t.order();
    let norm2: f64 = t.data().iter().map(|v| v * v).sum();
    let mut factors = initial_factors(t, rank, cfg.seed)?;
    let unfoldings: Vec<DMatrix<f64>> = (0..order).map(|d| matricize(t, d)).collect::<Result<_>>()?;
    let mut weights = vec![1.0; rank];
    for a in factors.iter_mut() {
        normalize_columns(a);
    }
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter.max(1) {
        let mut mttkrp = DMatrix::zeros(0, 0);
        for d in 0..order {
            let mut v = DMatrix::from_element(rank, rank, 1.0);
            for (m, a) in factors.iter().enumerate() {
                if m != d {
                    v.component_mul_assign(&(a.transpose() * a));
                }
            }
            let kr = khatri_rao_reversed(&factors, Some(d), rank);
            mttkrp = &unfoldings[d] * kr;
            let mut a = solve_right_sym(&mttkrp, &v, "CP normal equations")?;
            weights = normalize_columns(&mut a);
            factors[d] = a;
        }
        // The last updated mode carries the weights; evaluate the residual
        // from its MTTKRP so no reconstruction is needed.
        let last = &factors[order - 1];
        let mut inner = 0.0;
        for r in 0..rank {
            inner += weights[r] * last.column(r).dot(&mttkrp.column(r));
        }
        let mut gram = DMatrix::from_element(rank, rank, 1.0);
        for a in &factors {
            gram.component_mul_assign(&(a.transpose() * a));
        }
        let w = nalgebra::DVector::from_column_slice(&weights);
        let model2 = (w.transpose() * &gram * &w)[(0, 0)];
        let obj = (norm2 - 2.0 * inner + model2).max(0.0);
        if !obj.is_finite() {
            return Err(Error::NonFinite("CP objective".into()));
        }
        let prev = trace.last().copied();
        trace.push(obj);
        if let Some(prev) = prev {
            if prev - obj < cfg.tol * prev || obj <= 1e-28 * norm2 {
                converged = true;
                break;
            }
        }
    }
    Ok(CpdFit {
        factors: FactorSet::new(factors)?,
        weights,
        trace,
        converged,
    })
}

fn normalize_columns(a: &mut DMatrix<f64>) -> Vec<f64> {
    (0..a.ncols())
        .map(|r| {
            let n = a.column(r).norm();
            if n > 0.0 {
                a.column_mut(r).unscale_mut(n);
            }
            n
        })
        .collect()
}

/// Starting values for the functional solver.
#[derive(Debug, Clone)]
pub struct CpdInit {
    /// `G × R`, columns with unit quadrature norm.
    pub phi: DMatrix<f64>,
    /// Unit-norm columns.
    pub factors: Vec<DMatrix<f64>>,
    pub lambda: DMatrix<f64>,
    /// Sample-entry pairs that fell back to the population mean.
    pub fallbacks: usize,
    pub cpd: CpdFit,
}

/// Smooths each sample onto the grid, centers, runs [`cpd_als`] on the
/// `n × G × p_1 × … × p_D` array and converts the factors to model scale.
pub fn cpd_init_from_dataset(
    d: &Dataset,
    mean: &MeanField,
    rank: usize,
    quad: &QuadratureRule,
    cfg: &CpdConfig,
) -> Result<CpdInit> {
    let (tensor, fallbacks) = smoothed_sample_tensor(d, mean, &quad.nodes)?;
    let fit = cpd_als(&tensor, rank, cfg)?;
    let factors = fit.factors.factors();
    let scores = &factors[0];
    let mut phi = factors[1].clone();
    let mut scale = fit.weights.clone();
    for (r, s) in scale.iter_mut().enumerate() {
        let sq: Vec<f64> = phi.column(r).iter().map(|v| v * v).collect();
        let n = quad.integrate(&sq).sqrt();
        if n > 0.0 {
            phi.column_mut(r).unscale_mut(n);
        }
        *s *= n;
    }
    let n = scores.nrows();
    let u = DMatrix::from_fn(n, rank, |i, r| scores[(i, r)] * scale[r]);
    let lambda = if n < 2 {
        DMatrix::identity(rank, rank)
    } else {
        let means: Vec<f64> = (0..rank).map(|r| u.column(r).mean()).collect();
        let c = DMatrix::from_fn(n, rank, |i, r| u[(i, r)] - means[r]);
        (c.transpose() * c) / n as f64
    };
    Ok(CpdInit {
        phi,
        factors: factors[2..].to_vec(),
        lambda,
        fallbacks,
        cpd: fit,
    })
}

/// The centered `n × G × p_1 × … × p_D` array of per-sample smooths and the
/// number of sample-entry pairs replaced by the mean.
pub fn smoothed_sample_tensor(d: &Dataset, mean: &MeanField, grid: &[f64]) -> Result<(DenseTensor, usize)> {
    let n = d.n_samples();
    let p = d.n_entries();
    let g = grid.len();
    let mut shape = vec![n, g];
    shape.extend_from_slice(d.shape());
    let mut data = vec![0.0; n * g * p];
    let pooled = mean.bandwidths().iter().cloned().fold(0.0, f64::max);
    let mut fallbacks = 0;
    for (i, s) in d.samples().iter().enumerate() {
        for j in 0..p {
            let pts: Vec<Point1> = (0..s.n_times())
                .filter_map(|k| s.value(k, j).map(|y| Point1 { t: s.times()[k], y, w: 1.0 }))
                .collect();
            let own = default_bandwidth(pts.iter().map(|q| q.t)).unwrap_or(0.0);
            let h = pooled.max(own);
            let curve = if pts.len() >= 2 {
                local_linear_1d(&pts, h, grid).ok()
            } else {
                None
            };
            let curve = match curve {
                Some(c) => c,
                None => {
                    fallbacks += 1;
                    grid.iter().map(|&t| mean.eval(j, t)).collect()
                }
            };
            for (gi, &t) in grid.iter().enumerate() {
                data[i + n * (gi + g * j)] = curve[gi] - mean.eval(j, t);
            }
        }
    }
    Ok((DenseTensor::new(shape, data)?, fallbacks))
}
