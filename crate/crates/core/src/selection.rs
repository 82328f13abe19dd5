//! Gaussian log-likelihood, likelihood cross-validation and AIC for
//! choosing the rank.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{assemble, CovarianceConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::sample_log_likelihood;
use crate::model::{fit_with_covariance, FitConfig, LfParafacModel};

/// Sum over samples of the observed-entry Gaussian log-likelihood.
pub fn log_likelihood(model: &LfParafacModel, d: &Dataset) -> Result<f64> {
    let parts: Vec<f64> = d
        .samples()
        .par_iter()
        .map(|s| sample_log_likelihood(model, s))
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub rank: usize,
    /// Mean held-out log-likelihood (LCV) or AIC value; NaN when every fit
    /// for this rank failed.
    pub criterion: f64,
    pub fold_values: Vec<f64>,
    pub wall_time_secs: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub method: String,
    pub scores: Vec<RankScore>,
    pub best: Option<usize>,
}

/// Seeded random partition of `0..n` into `k` folds of near-equal size.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Invalid(format!("need at least 2 folds, got {k}")));
    }
    if n < 2 * k {
        return Err(Error::Invalid(format!("{n} samples cannot fill {k} folds of at least 2")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, s) in idx.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

/// K-fold likelihood cross-validation. The covariance field is re-estimated
/// on every training split; the returned best rank maximizes the mean
/// held-out log-likelihood.
pub fn select_rank_lcv(
    d: &Dataset,
    ranks: &[usize],
    folds: usize,
    seed: u64,
    cov_cfg: &CovarianceConfig,
    cfg: &FitConfig,
) -> Result<Selection> {
    let assignment = fold_assignment(d.n_samples(), folds, seed)?;
    let splits: Vec<(Dataset, Dataset)> = assignment
        .iter()
        .map(|test| {
            let train: Vec<usize> = (0..d.n_samples()).filter(|i| !test.contains(i)).collect();
            Ok((d.subset(&train)?, d.subset(test)?))
        })
        .collect::<Result<_>>()?;
    let covs: Vec<_> = splits
        .par_iter()
        .map(|(train, _)| assemble(train, cov_cfg))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = ranks
        .iter()
        .flat_map(|&r| (0..folds).map(move |f| (r, f)))
        .collect();
    let results: Vec<(Result<f64>, f64)> = jobs
        .par_iter()
        .map(|&(r, f)| {
            let clock = Instant::now();
            let (train, test) = &splits[f];
            let out = fit_with_covariance(train, &covs[f], r, cfg).and_then(|(m, _)| log_likelihood(&m, test));
            (out, clock.elapsed().as_secs_f64())
        })
        .collect();
    let scores = ranks
        .iter()
        .enumerate()
        .map(|(ri, &r)| {
            let chunk = &results[ri * folds..(ri + 1) * folds];
            let mut values = Vec::with_capacity(folds);
            let mut error = None;
            for (res, _) in chunk {
                match res {
                    Ok(v) => values.push(*v),
                    Err(e) => {
                        values.push(f64::NAN);
                        error.get_or_insert_with(|| e.to_string());
                    }
                }
            }
            let criterion = if error.is_some() {
                f64::NAN
            } else {
                values.iter().sum::<f64>() / folds as f64
            };
            RankScore {
                rank: r,
                criterion,
                fold_values: values,
                wall_time_secs: chunk.iter().map(|(_, t)| t).sum(),
                error,
            }
        })
        .collect::<Vec<_>>();
    let best = pick(&scores, |a, b| a > b);
    Ok(Selection {
        method: "lcv".into(),
        scores,
        best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AicPenalty {
    /// `R − L`.
    #[default]
    Rank,
    /// Number of free parameters minus `L`.
    ParameterCount,
}

/// Free parameters of a rank-`r` model on `g` grid nodes: Λ, unit-norm Φ
/// columns and factor columns, and σ².
pub fn parameter_count(r: usize, g: usize, shape: &[usize]) -> usize {
    r * (r + 1) / 2 + r * (g - 1) + shape.iter().map(|&p| r * (p - 1)).sum::<usize>() + 1
}

/// One full-data fit per candidate; the best rank minimizes the criterion.
pub fn select_rank_aic(
    d: &Dataset,
    ranks: &[usize],
    penalty: AicPenalty,
    cov_cfg: &CovarianceConfig,
    cfg: &FitConfig,
) -> Result<Selection> {
    let cov = assemble(d, cov_cfg)?;
    let scores: Vec<RankScore> = ranks
        .par_iter()
        .map(|&r| {
            let clock = Instant::now();
            let out = fit_with_covariance(d, &cov, r, cfg).and_then(|(m, _)| log_likelihood(&m, d));
            let pen = match penalty {
                AicPenalty::Rank => r as f64,
                AicPenalty::ParameterCount => parameter_count(r, cov.grid_size(), d.shape()) as f64,
            };
            let (criterion, error) = match out {
                Ok(ll) => (pen - ll, None),
                Err(e) => (f64::NAN, Some(e.to_string())),
            };
            RankScore {
                rank: r,
                criterion,
                fold_values: Vec::new(),
                wall_time_secs: clock.elapsed().as_secs_f64(),
                error,
            }
        })
        .collect();
    let best = pick(&scores, |a, b| a < b);
    Ok(Selection {
        method: "aic".into(),
        scores,
        best,
    })
}

/// First rank whose finite criterion beats every other under `better`.
fn pick(scores: &[RankScore], better: impl Fn(f64, f64) -> bool) -> Option<usize> {
    let mut best: Option<&RankScore> = None;
    for s in scores.iter().filter(|s| s.criterion.is_finite()) {
        if best.is_none_or(|b| better(s.criterion, b.criterion)) {
            best = Some(s);
        }
    }
    best.map(|s| s.rank)
}

/// Writes `rank,<method>,...,best` rows, one per candidate rank, for each
/// selection given (all must cover the same ranks).
pub fn write_report_csv(selections: &[Selection], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["rank".to_string()];
    for s in selections {
        header.push(s.method.clone());
        header.push(format!("{}_best", s.method));
    }
    w.write_record(&header)?;
    let Some(first) = selections.first() else {
        w.flush()?;
        return Ok(());
    };
    for (i, score) in first.scores.iter().enumerate() {
        let mut row = vec![score.rank.to_string()];
        for s in selections {
            let sc = &s.scores[i];
            row.push(sc.criterion.to_string());
            row.push((s.best == Some(sc.rank)).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
