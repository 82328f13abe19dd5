//! The latent functional PARAFAC model and its block-relaxation solver.
//!
//! The model writes a centered functional tensor as
//! `x(t) = Σ_r u_r φ_r(t) a_1r ∘ … ∘ a_Dr` with `u ~ N(0, Λ)`. Given the
//! smoothed covariance field, each sweep updates Λ, then Φ, then every
//! tabular factor in closed form.
//!
//! Notation used below: `A` is the `P × R` Khatri-Rao product of the tabular
//! factors (first mode fastest in its rows), `G_Φ = Σ_g w_g φ(s_g)ᵀφ(s_g)`,
//! `Gram = (AᵀA) ∘ G_Φ` and `K(s) = A diag(φ(s)) Gram⁻¹`.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::{assemble, CovarianceConfig, CovarianceField, QuadratureRule};
use crate::cpd::{cpd_init_from_dataset, CpdConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{floor_psd, krank, solve_right_sym, symmetrize};
use crate::smoothing::{interpolate, MeanField};
use crate::tensor::{khatri_rao_reversed, matricized_position};

mod rows {
    //! Serde adapters storing matrices as lists of rows.
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>, cols: usize) -> Result<DMatrix<f64>, E> {
        if rows.iter().any(|r| r.len() != cols) {
            return Err(E::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        from_rows(rows, cols)
    }

    pub mod many {
        use super::*;

        pub fn serialize<S: Serializer>(m: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            m.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            Vec::<Vec<Vec<f64>>>::deserialize(d)?
                .into_iter()
                .map(|rows| {
                    let cols = rows.first().map_or(0, Vec::len);
                    from_rows(rows, cols)
                })
                .collect()
        }
    }
}

/// Fitted parameters. `phi` is `G × R` on the quadrature grid and
/// `factors[d]` is `p_d × R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfParafacModel {
    pub rank: usize,
    pub shape: Vec<usize>,
    pub domain: (f64, f64),
    pub quadrature: QuadratureRule,
    #[serde(with = "rows")]
    pub phi: DMatrix<f64>,
    #[serde(with = "rows::many")]
    pub factors: Vec<DMatrix<f64>>,
    #[serde(with = "rows")]
    pub lambda: DMatrix<f64>,
    pub sigma2: f64,
    pub mean: MeanField,
    /// Settings that produced the model, if recorded.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl LfParafacModel {
    /// Assembles a model on the grid of `cov`, checking dimensions.
    pub fn new(
        cov: &CovarianceField,
        phi: DMatrix<f64>,
        factors: Vec<DMatrix<f64>>,
        lambda: DMatrix<f64>,
    ) -> Result<Self> {
        let rank = phi.ncols();
        if rank == 0 {
            return Err(Error::Invalid("rank must be at least 1".into()));
        }
        if phi.nrows() != cov.grid_size() {
            return Err(Error::Shape(format!("Φ has {} rows, grid has {}", phi.nrows(), cov.grid_size())));
        }
        if factors.len() != cov.shape().len()
            || factors.iter().zip(cov.shape()).any(|(a, &p)| a.nrows() != p || a.ncols() != rank)
        {
            return Err(Error::Shape("factor matrices do not match tensor shape and rank".into()));
        }
        if lambda.nrows() != rank || lambda.ncols() != rank {
            return Err(Error::Shape(format!("Λ must be {rank}x{rank}")));
        }
        let q = cov.quadrature();
        Ok(Self {
            rank,
            shape: cov.shape().to_vec(),
            domain: q.domain(),
            quadrature: q.clone(),
            phi,
            factors,
            lambda,
            sigma2: cov.sigma2(),
            mean: cov.mean().clone(),
            config: serde_json::Value::Null,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.quadrature.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.quadrature.weights
    }

    pub fn n_entries(&self) -> usize {
        self.shape.iter().product()
    }

    /// `A_D ⊙ … ⊙ A_1`, `P × R`.
    pub fn khatri_rao(&self) -> DMatrix<f64> {
        khatri_rao_reversed(&self.factors, None, self.rank)
    }

    /// `Σ_g w_g φ(s_g)ᵀ φ(s_g)`.
    pub fn phi_gram(&self) -> DMatrix<f64> {
        let wphi = DMatrix::from_fn(self.phi.nrows(), self.rank, |g, r| self.weights()[g] * self.phi[(g, r)]);
        symmetrize(&(self.phi.transpose() * wphi))
    }

    /// `(AᵀA) ∘ G_Φ`, the Gram matrix of `A ⊙ Φ(·)` under quadrature.
    pub fn gram(&self) -> DMatrix<f64> {
        let a = self.khatri_rao();
        (a.transpose() * &a).component_mul(&self.phi_gram())
    }

    /// Φ at an arbitrary time by linear interpolation on the grid.
    pub fn phi_at(&self, t: f64) -> Vec<f64> {
        (0..self.rank)
            .map(|r| interpolate(self.grid(), self.phi.column(r).as_slice(), t))
            .collect()
    }

    /// Noise-free covariance `(A ⊙ Φ(s_g)) Λ (A ⊙ Φ(s_h))ᵀ`, `P × P`.
    pub fn model_covariance(&self, g: usize, h: usize) -> DMatrix<f64> {
        let a = self.khatri_rao();
        let bg = DMatrix::from_fn(a.nrows(), self.rank, |j, r| a[(j, r)] * self.phi[(g, r)]);
        let bh = DMatrix::from_fn(a.nrows(), self.rank, |j, r| a[(j, r)] * self.phi[(h, r)]);
        bg * &self.lambda * bh.transpose()
    }

    /// Warning text when `Σ_d krank(A_d) < D − 1`.
    pub fn krank_warning(&self) -> Option<String> {
        let ks: Vec<usize> = self.factors.iter().map(|a| krank(a, 1e-8)).collect();
        let total: usize = ks.iter().sum();
        let d = self.factors.len();
        (total + 1 < d).then(|| format!("k-ranks {ks:?} sum to {total} < D - 1 = {}", d - 1))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Quantities derived from one evaluation of `K` against the covariance.
///
/// `kw` stacks `w_g K(s_g)` with row `g·P + j`; `z = Σ · kw` so that block
/// `g` of `z` is `Z_g = Σ_h w_h Σ(s_g, s_h) K(s_h)`.
struct Projection {
    kw: DMatrix<f64>,
    z: DMatrix<f64>,
    /// `Σ_g w_g K_gᵀ Z_g` before symmetrization and flooring.
    lambda_raw: DMatrix<f64>,
}

impl Projection {
    fn new(model: &LfParafacModel, cov: &CovarianceField) -> Result<Self> {
        let k = k_stack(model)?;
        let p = model.n_entries();
        let w = model.weights();
        let kw = DMatrix::from_fn(k.nrows(), k.ncols(), |i, r| w[i / p] * k[(i, r)]);
        let z = cov.matrix() * &kw;
        let lambda_raw = kw.transpose() * &z;
        if lambda_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Λ update".into()));
        }
        Ok(Self { kw, z, lambda_raw })
    }

    fn lambda(&self) -> DMatrix<f64> {
        floor_psd(&self.lambda_raw)
    }

    /// `[g, r] = Σ_j A[j, r] Z_g[j, r]`, the Φ-update numerator.
    fn za(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let p = a.nrows();
        let g = self.z.nrows() / p;
        DMatrix::from_fn(g, a.ncols(), |gi, r| (0..p).map(|j| a[(j, r)] * self.z[(gi * p + j, r)]).sum())
    }

    /// `[j, r] = Σ_g w_g φ_r(s_g) Z_g[j, r]`.
    fn z_phi(&self, phi: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
        let g = phi.nrows();
        let p = self.z.nrows() / g;
        DMatrix::from_fn(p, phi.ncols(), |j, r| (0..g).map(|gi| w[gi] * phi[(gi, r)] * self.z[(gi * p + j, r)]).sum())
    }

    fn permute(&mut self, order: &[usize]) {
        self.kw = self.kw.select_columns(order);
        self.z = self.z.select_columns(order);
        self.lambda_raw = self.lambda_raw.select_rows(order).select_columns(order);
    }
}

/// `K(s_g)` for every node stacked as a `GP × R` matrix, row `g·P + j`.
fn k_stack(model: &LfParafacModel) -> Result<DMatrix<f64>> {
    let a = model.khatri_rao();
    let p = a.nrows();
    let g = model.phi.nrows();
    let b = DMatrix::from_fn(g * p, model.rank, |i, r| a[(i % p, r)] * model.phi[(i / p, r)]);
    solve_right_sym(&b, &model.gram(), "Gram matrix of A ⊙ Φ")
}

/// `K(s_g) = (A ⊙ Φ(s_g)) Gram⁻¹`, `P × R`.
pub fn k_matrix(model: &LfParafacModel, g: usize) -> Result<DMatrix<f64>> {
    let p = model.n_entries();
    Ok(k_stack(model)?.rows(g * p, p).into_owned())
}

/// `Σ_g Σ_h w_g w_h K_gᵀ Σ(s_g, s_h) K_h`, symmetrized and floored at zero.
pub fn update_lambda(model: &LfParafacModel, cov: &CovarianceField) -> Result<DMatrix<f64>> {
    Ok(Projection::new(model, cov)?.lambda())
}

fn phi_step(model: &LfParafacModel, proj: &Projection, lambda: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let a = model.khatri_rao();
    let den = (a.transpose() * &a).component_mul(lambda);
    solve_right_sym(&proj.za(&a), &den, "Φ update (AᵀA ∘ Λ)")
}

/// Closed-form Φ update using the model's current Λ.
pub fn update_phi(model: &LfParafacModel, cov: &CovarianceField) -> Result<DMatrix<f64>> {
    let proj = Projection::new(model, cov)?;
    phi_step(model, &proj, &model.lambda)
}

fn factor_step(
    model: &LfParafacModel,
    z_phi: &DMatrix<f64>,
    mode: usize,
    lambda: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let r = model.rank;
    let others = khatri_rao_reversed(&model.factors, Some(mode), r);
    let pd = model.shape[mode];
    let mut num = DMatrix::zeros(pd, r);
    for j in 0..model.n_entries() {
        let (i, m) = matricized_position(&model.shape, mode, j);
        for c in 0..r {
            num[(i, c)] += z_phi[(j, c)] * others[(m, c)];
        }
    }
    let den = (others.transpose() * &others)
        .component_mul(&model.phi_gram())
        .component_mul(lambda);
    solve_right_sym(&num, &den, &format!("factor update for mode {mode}"))
}

/// Closed-form update of `A_mode` (zero-based) using the model's current Λ.
///
/// The numerator integrates `Σ_[d](s, t) (A_(-d) ⊙ Φ(s) ⊙ K(t))`, which has
/// the generating parameters as an exact fixed point.
pub fn update_factor(model: &LfParafacModel, cov: &CovarianceField, mode: usize) -> Result<DMatrix<f64>> {
    check_mode(model, mode)?;
    let proj = Projection::new(model, cov)?;
    let z_phi = proj.z_phi(&model.phi, model.weights());
    factor_step(model, &z_phi, mode, &model.lambda)
}

/// The variant of [`update_factor`] with the integration variables of Φ and
/// `K` exchanged. It agrees with [`update_factor`] whenever every surface
/// satisfies `Σ_jk(s, t) = Σ_jk(t, s)`.
pub fn update_factor_swapped(model: &LfParafacModel, cov: &CovarianceField, mode: usize) -> Result<DMatrix<f64>> {
    check_mode(model, mode)?;
    let k = k_stack(model)?;
    let p = model.n_entries();
    let g = model.phi.nrows();
    let w = model.weights();
    let r = model.rank;
    // y[(h, j), r] = Σ_g w_g Σ_k Σ_jk(s_g, s_h) K_g[k, r]
    let mut y = DMatrix::<f64>::zeros(g * p, r);
    for h in 0..g {
        for j in 0..p {
            for gi in 0..g {
                for kk in 0..p {
                    let s = w[gi] * cov.get(gi, h, j, kk);
                    for c in 0..r {
                        y[(h * p + j, c)] += s * k[(gi * p + kk, c)];
                    }
                }
            }
        }
    }
    let z_phi = DMatrix::from_fn(p, r, |j, c| (0..g).map(|h| w[h] * model.phi[(h, c)] * y[(h * p + j, c)]).sum());
    factor_step(model, &z_phi, mode, &model.lambda)
}

fn check_mode(model: &LfParafacModel, mode: usize) -> Result<()> {
    if mode >= model.shape.len() {
        return Err(Error::Invalid(format!("mode {mode} out of range for order {}", model.shape.len())));
    }
    Ok(())
}

/// Rescales to unit-norm Φ columns and factor columns, applies the sign
/// rules, absorbs scales and signs into Λ and sorts by descending `Λ_rr`.
pub fn normalize(model: &mut LfParafacModel) -> Result<()> {
    let scales = normalize_scales(model)?;
    let s = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scales));
    model.lambda = symmetrize(&(&s * &model.lambda * &s));
    let order = descending_order(&model.lambda);
    permute_components(model, &order);
    Ok(())
}

fn normalize_scales(model: &mut LfParafacModel) -> Result<Vec<f64>> {
    let w = model.quadrature.weights.clone();
    let mut scales = vec![1.0; model.rank];
    for (r, scale) in scales.iter_mut().enumerate() {
        let col = model.phi.column(r);
        let norm = col.iter().zip(&w).map(|(v, w)| w * v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateComponent { component: r });
        }
        let sign = leading_sign(col.as_slice());
        model.phi.column_mut(r).scale_mut(sign / norm);
        *scale *= norm * sign;
        for a in model.factors.iter_mut() {
            let col = a.column(r);
            let norm = col.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::DegenerateComponent { component: r });
            }
            let sign = leading_sign(col.as_slice());
            a.column_mut(r).scale_mut(sign / norm);
            *scale *= norm * sign;
        }
    }
    Ok(scales)
}

/// Sign of the first entry that is not negligible relative to the largest.
fn leading_sign(v: &[f64]) -> f64 {
    let top = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    match v.iter().find(|x| x.abs() > 1e-12 * top) {
        Some(x) if *x < 0.0 => -1.0,
        _ => 1.0,
    }
}

fn descending_order(lambda: &DMatrix<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lambda.nrows()).collect();
    order.sort_by(|&a, &b| lambda[(b, b)].total_cmp(&lambda[(a, a)]));
    order
}

fn permute_components(model: &mut LfParafacModel, order: &[usize]) {
    model.phi = model.phi.select_columns(order);
    for a in model.factors.iter_mut() {
        *a = a.select_columns(order);
    }
    model.lambda = model.lambda.select_rows(order).select_columns(order);
}

fn objective_from(model: &LfParafacModel, proj: &Projection, lambda: &DMatrix<f64>) -> f64 {
    let a = model.khatri_rao();
    let first = model.gram().component_mul(lambda).sum();
    let za = proj.za(&a);
    let w = model.weights();
    let second: f64 = (0..model.phi.nrows())
        .map(|g| w[g] * (0..model.rank).map(|r| model.phi[(g, r)] * za[(g, r)]).sum::<f64>())
        .sum();
    first - 2.0 * second
}

/// `C = ∫ Φ (AᵀA ∘ Λ) Φᵀ − 2 ∫∫ Φ(s) Σ_[f](s, t) (A ⊙ K(t))` with Λ set to
/// its optimal value for the current Φ and factors.
pub fn objective(model: &LfParafacModel, cov: &CovarianceField) -> Result<f64> {
    let proj = Projection::new(model, cov)?;
    Ok(objective_from(model, &proj, &proj.lambda()))
}

/// Gâteaux derivative of [`objective`] in Φ as a density on the grid:
/// row `g` is `2 Φ(s_g)(AᵀA ∘ Λ) − 2 ∫ Σ_[f](s_g, t)(A ⊙ K(t)) dt`. The
/// directional derivative along `δ` is `Σ_g w_g ⟨row_g, δ(s_g)⟩`.
pub fn gateaux_phi(model: &LfParafacModel, cov: &CovarianceField) -> Result<DMatrix<f64>> {
    let proj = Projection::new(model, cov)?;
    let lambda = proj.lambda();
    let a = model.khatri_rao();
    let m = (a.transpose() * &a).component_mul(&lambda);
    Ok((&model.phi * m - proj.za(&a)) * 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Relative tolerance on the change of the objective between sweeps.
    pub epsilon: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Extra randomly perturbed starts; the best final objective wins.
    pub restarts: usize,
    pub cpd_max_iter: usize,
    pub cpd_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            max_iter: 200,
            seed: 0,
            restarts: 0,
            cpd_max_iter: 500,
            cpd_tol: 1e-10,
        }
    }
}

/// Frobenius norms of each block's change during one sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateNorms {
    pub lambda: f64,
    pub phi: f64,
    pub factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Objective after each sweep.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_secs: f64,
    pub update_norms: Vec<UpdateNorms>,
    /// Sample-entry pairs the initializer filled with the mean curve.
    pub init_fallbacks: usize,
    pub restart: usize,
    pub warnings: Vec<String>,
}

/// Estimates the covariance field from `d` and fits a rank-`rank` model.
pub fn fit(
    d: &Dataset,
    rank: usize,
    cov_cfg: &CovarianceConfig,
    cfg: &FitConfig,
) -> Result<(LfParafacModel, FitReport, CovarianceField)> {
    let cov = assemble(d, cov_cfg)?;
    let (model, report) = fit_with_covariance(d, &cov, rank, cfg)?;
    Ok((model, report, cov))
}

/// Fits on a pre-assembled field, initializing from a CP decomposition of
/// the per-sample smooths of `d`.
pub fn fit_with_covariance(
    d: &Dataset,
    cov: &CovarianceField,
    rank: usize,
    cfg: &FitConfig,
) -> Result<(LfParafacModel, FitReport)> {
    if rank == 0 {
        return Err(Error::Invalid("rank must be at least 1".into()));
    }
    let cpd_cfg = CpdConfig {
        max_iter: cfg.cpd_max_iter,
        tol: cfg.cpd_tol,
        seed: cfg.seed,
    };
    let init = cpd_init_from_dataset(d, cov.mean(), rank, cov.quadrature(), &cpd_cfg)?;
    let start = LfParafacModel::new(cov, init.phi, init.factors, init.lambda)?;
    let (model, mut report) = fit_multistart(start, cov, cfg)?;
    report.init_fallbacks = init.fallbacks;
    Ok((model, report))
}

fn fit_multistart(start: LfParafacModel, cov: &CovarianceField, cfg: &FitConfig) -> Result<(LfParafacModel, FitReport)> {
    let mut best = fit_from(start.clone(), cov, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    for k in 1..=cfg.restarts {
        let mut m = start.clone();
        perturb(&mut m.phi, 0.3, &mut rng);
        for a in m.factors.iter_mut() {
            perturb(a, 0.3, &mut rng);
        }
        match fit_from(m, cov, cfg) {
            Ok((model, mut report)) => {
                let better = match (report.trace.last(), best.1.trace.last()) {
                    (Some(a), Some(b)) => a < b,
                    _ => false,
                };
                if better {
                    report.restart = k;
                    best = (model, report);
                }
            }
            Err(e) => log::warn!("restart {k} failed: {e}"),
        }
    }
    Ok(best)
}

/// Adds Gaussian noise scaled to each column's RMS.
fn perturb(m: &mut DMatrix<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    for mut col in m.column_iter_mut() {
        let rms = (col.norm_squared() / col.len() as f64).sqrt();
        for v in col.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += scale * rms * e;
        }
    }
}

/// Runs the block relaxation from the given starting parameters.
///
/// Each sweep evaluates `K` once from the parameters at its start, sets Λ
/// to its optimal value, then updates Φ and each `A_d` in turn. After the
/// sweep the model is normalized, Λ is recomputed for the new parameters
/// and the objective is recorded.
pub fn fit_from(mut model: LfParafacModel, cov: &CovarianceField, cfg: &FitConfig) -> Result<(LfParafacModel, FitReport)> {
    let clock = Instant::now();
    if !(cfg.epsilon >= 0.0) {
        return Err(Error::Invalid(format!("epsilon {} must be non-negative", cfg.epsilon)));
    }
    normalize(&mut model)?;
    let mut proj = Projection::new(&model, cov)?;
    model.lambda = proj.lambda();
    let mut current = objective_from(&model, &proj, &model.lambda);
    if !current.is_finite() {
        return Err(Error::NonFinite("initial objective".into()));
    }
    let mut trace = Vec::new();
    let mut norms = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iter.max(1) {
        let before = model.clone();
        let lambda = model.lambda.clone();
        model.phi = phi_step(&model, &proj, &lambda)?;
        let z_phi = proj.z_phi(&model.phi, model.weights());
        for d in 0..model.factors.len() {
            model.factors[d] = factor_step(&model, &z_phi, d, &lambda)?;
        }
        normalize(&mut model)?;
        proj = Projection::new(&model, cov)?;
        model.lambda = proj.lambda();
        let order = descending_order(&model.lambda);
        permute_components(&mut model, &order);
        proj.permute(&order);
        let next = objective_from(&model, &proj, &model.lambda);
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("objective at sweep {}", trace.len() + 1)));
        }
        norms.push(UpdateNorms {
            lambda: (&model.lambda - &before.lambda).norm(),
            phi: (&model.phi - &before.phi).norm(),
            factors: model.factors.iter().zip(&before.factors).map(|(a, b)| (a - b).norm()).collect(),
        });
        trace.push(next);
        let change = (next - current).abs();
        current = next;
        if change < cfg.epsilon * (1.0 + next.abs()) {
            converged = true;
            break;
        }
    }
    let mut warnings = Vec::new();
    if let Some(w) = model.krank_warning() {
        log::warn!("{w}");
        warnings.push(w);
    }
    let report = FitReport {
        iterations: trace.len(),
        trace,
        converged,
        wall_time_secs: clock.elapsed().as_secs_f64(),
        update_norms: norms,
        init_fallbacks: 0,
        restart: 0,
        warnings,
    };
    Ok((model, report))
}
