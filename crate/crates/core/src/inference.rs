//! Empirical Bayes prediction of sample scores and trajectory reconstruction.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LongitudinalSample};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, solve_right_sym, sqrt_psd, symmetrize};
use crate::model::LfParafacModel;

/// Rows of `A ⊙ Φ(t_k)` for the given `(time index, entry)` pairs, in the
/// order given. Φ is linearly interpolated between grid nodes.
pub fn design_matrix(model: &LfParafacModel, times: &[f64], pairs: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let a = model.khatri_rao();
    let phis: Vec<Vec<f64>> = times.iter().map(|&t| model.phi_at(t)).collect();
    let p = model.n_entries();
    let mut f = DMatrix::zeros(pairs.len(), model.rank);
    for (row, &(k, j)) in pairs.iter().enumerate() {
        if k >= times.len() || j >= p {
            return Err(Error::Invalid(format!("observation ({k}, {j}) out of range")));
        }
        for r in 0..model.rank {
            f[(row, r)] = a[(j, r)] * phis[k][r];
        }
    }
    Ok(f)
}

/// Observed `(time index, entry)` pairs of a sample, entry-major with time
/// fastest, matching the row order of `A ⊙ Φ_i`.
pub fn observed_rows(sample: &LongitudinalSample) -> Vec<(usize, usize)> {
    sample.observed_pairs()
}

/// Design matrix and centered response of a sample.
pub fn sample_system(model: &LfParafacModel, sample: &LongitudinalSample) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if sample.n_entries() != model.n_entries() {
        return Err(Error::Shape(format!(
            "sample {} has {} entries, model has {}",
            sample.id(),
            sample.n_entries(),
            model.n_entries()
        )));
    }
    let pairs = observed_rows(sample);
    if pairs.is_empty() {
        return Err(Error::Sample {
            sample: sample.id().to_string(),
            message: "no observed entries".into(),
        });
    }
    let f = design_matrix(model, sample.times(), &pairs)?;
    let r = DVector::from_iterator(
        pairs.len(),
        pairs.iter().map(|&(k, j)| {
            sample.value(k, j).expect("observed") - model.mean.eval(j, sample.times()[k])
        }),
    );
    Ok((f, r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePrediction {
    pub sample_id: String,
    pub u_hat: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub n_observed: usize,
}

impl ScorePrediction {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let r = self.u_hat.len();
        DMatrix::from_fn(r, r, |i, j| self.covariance[i][j])
    }
}

/// Low-rank form of the Gaussian conditioning for one sample. With
/// `L = Λ^{1/2}` and `M = L FᵀF L + σ² I`, everything needed reduces to
/// `R × R` solves with `M`.
struct Posterior {
    l: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// `L Fᵀ r`.
    b: DVector<f64>,
    rr: f64,
    n: usize,
    sigma2: f64,
}

impl Posterior {
    fn new(lambda: &DMatrix<f64>, sigma2: f64, f: &DMatrix<f64>, r: &DVector<f64>, id: &str) -> Result<Self> {
        let l = sqrt_psd(lambda);
        let lf = &l * f.transpose();
        let mut m = symmetrize(&(&lf * lf.transpose()));
        for i in 0..m.nrows() {
            m[(i, i)] += sigma2;
        }
        let chol = cholesky_jitter(&m, &format!("posterior system of sample {id}"))?;
        Ok(Self {
            b: lf * r,
            rr: r.norm_squared(),
            n: r.len(),
            l,
            chol,
            sigma2,
        })
    }

    fn mean(&self) -> DVector<f64> {
        &self.l * self.chol.solve(&self.b)
    }

    fn covariance(&self) -> DMatrix<f64> {
        let inner = self.chol.inverse();
        symmetrize(&(&self.l * inner * &self.l * self.sigma2))
    }

    /// `−½ (rᵀ Σ_y⁻¹ r + log |Σ_y|)` with `Σ_y = F Λ Fᵀ + σ² I`.
    fn log_likelihood(&self) -> f64 {
        let quad = (self.rr - self.b.dot(&self.chol.solve(&self.b))) / self.sigma2;
        let r = self.b.len();
        // log|Σ_y| = n log σ² + log|I + L FᵀF L / σ²| = (n − R) log σ² + log|M|.
        let log_det_m: f64 = 2.0 * self.chol.l_dirty().diagonal().iter().take(r).map(|v| v.ln()).sum::<f64>();
        let log_det = (self.n as f64 - r as f64) * self.sigma2.ln() + log_det_m;
        -0.5 * (quad + log_det)
    }
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Invalid(format!("noise variance {sigma2} must be positive")));
    }
    Ok(())
}

/// `û = Λ Fᵀ (F Λ Fᵀ + σ² I)⁻¹ (y − m)` and its posterior covariance
/// `Λ − Λ Fᵀ (F Λ Fᵀ + σ² I)⁻¹ F Λ`, using only observed entries.
pub fn predict_scores(model: &LfParafacModel, sample: &LongitudinalSample) -> Result<ScorePrediction> {
    check_sigma2(model.sigma2)?;
    let (f, r) = sample_system(model, sample)?;
    let post = Posterior::new(&model.lambda, model.sigma2, &f, &r, sample.id())?;
    let cov = post.covariance();
    Ok(ScorePrediction {
        sample_id: sample.id().to_string(),
        u_hat: post.mean().iter().copied().collect(),
        covariance: cov.row_iter().map(|row| row.iter().copied().collect()).collect(),
        n_observed: r.len(),
    })
}

pub fn predict_all(model: &LfParafacModel, d: &Dataset) -> Result<Vec<ScorePrediction>> {
    use rayon::prelude::*;
    d.samples().par_iter().map(|s| predict_scores(model, s)).collect()
}

/// Gaussian log-likelihood of one sample's observed entries, without the
/// `2π` constant.
pub fn sample_log_likelihood(model: &LfParafacModel, sample: &LongitudinalSample) -> Result<f64> {
    check_sigma2(model.sigma2)?;
    let (f, r) = sample_system(model, sample)?;
    let post = Posterior::new(&model.lambda, model.sigma2, &f, &r, sample.id())?;
    let ll = post.log_likelihood();
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!("log-likelihood of sample {}", sample.id())));
    }
    Ok(ll)
}

/// `x̂(t)_j = m_j(t) + Σ_r û_r φ_r(t) A[j, r]`; returns one row of `P`
/// values per requested time.
pub fn reconstruct(model: &LfParafacModel, u_hat: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>> {
    if u_hat.len() != model.rank {
        return Err(Error::Shape(format!("{} scores for rank {}", u_hat.len(), model.rank)));
    }
    let a = model.khatri_rao();
    let p = model.n_entries();
    Ok(times
        .iter()
        .map(|&t| {
            let phi = model.phi_at(t);
            (0..p)
                .map(|j| {
                    model.mean.eval(j, t) + (0..model.rank).map(|r| u_hat[r] * phi[r] * a[(j, r)]).sum::<f64>()
                })
                .collect()
        })
        .collect())
}

/// Noise-free projection `[Σ_g w_g x(s_g)ᵀ (A ⊙ Φ(s_g))] Gram⁻¹` of a
/// centered trajectory given on the grid (`values[g][j]`).
pub fn psi_star(model: &LfParafacModel, values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let g = model.grid().len();
    let p = model.n_entries();
    if values.len() != g || values.iter().any(|v| v.len() != p) {
        return Err(Error::Shape(format!("expected {g} grid slices of {p} entries")));
    }
    let a = model.khatri_rao();
    let w = model.weights();
    let mut num = DMatrix::zeros(1, model.rank);
    for (gi, x) in values.iter().enumerate() {
        for r in 0..model.rank {
            let s: f64 = (0..p).map(|j| x[j] * a[(j, r)]).sum();
            num[(0, r)] += w[gi] * s * model.phi[(gi, r)];
        }
    }
    let u = solve_right_sym(&num, &model.gram(), "projection Gram matrix")?;
    Ok(u.iter().copied().collect())
}

pub fn write_scores_csv(preds: &[ScorePrediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let r = preds.first().map_or(0, |p| p.u_hat.len());
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=r).map(|k| format!("u_{k}")));
    w.write_record(&header)?;
    for p in preds {
        let mut row = vec![p.sample_id.clone()];
        row.extend(p.u_hat.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reconstructed trajectories on the model grid in the dataset CSV layout.
pub fn write_trajectories_csv(model: &LfParafacModel, preds: &[ScorePrediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let p = model.n_entries();
    let mut header = vec!["sample_id".to_string(), "time".to_string()];
    header.extend((0..p).map(|j| crate::data::entry_label(&model.shape, j)));
    w.write_record(&header)?;
    for pred in preds {
        let rows = reconstruct(model, &pred.u_hat, model.grid())?;
        for (t, row) in model.grid().iter().zip(rows) {
            let mut rec = vec![pred.sample_id.clone(), t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
