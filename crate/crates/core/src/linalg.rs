//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative ridge added once when a symmetric system fails to factor.
pub const JITTER: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric matrix, retrying once with
/// `JITTER · trace / dim` on the diagonal.
pub fn cholesky_jitter(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    let sym = symmetrize(m);
    if let Some(c) = Cholesky::new(sym.clone()) {
        return Ok(c);
    }
    let n = sym.nrows();
    let ridge = JITTER * sym.trace().abs() / n as f64;
    if ridge > 0.0 {
        let mut jittered = sym;
        for i in 0..n {
            jittered[(i, i)] += ridge;
        }
        if let Some(c) = Cholesky::new(jittered) {
            return Ok(c);
        }
    }
    Err(Error::RankDeficient {
        context: context.to_string(),
        component: weakest_component(m),
    })
}

fn weakest_component(m: &DMatrix<f64>) -> Option<usize> {
    (0..m.nrows()).min_by(|&a, &b| m[(a, a)].total_cmp(&m[(b, b)]))
}

/// `rhs · m⁻¹` for symmetric positive (semi)definite `m`.
pub fn solve_right_sym(rhs: &DMatrix<f64>, m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky_jitter(m, context)?;
    Ok(chol.solve(&rhs.transpose()).transpose())
}

/// Eigenvalues floored at zero; the result is exactly symmetric.
pub fn floor_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}

/// Symmetric square root of a PSD matrix (negative eigenvalues clipped).
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Numerical rank from singular values relative to the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Largest `k` such that every set of `k` columns is linearly independent.
/// Exhaustive over column subsets, so intended for small ranks.
pub fn krank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let r = m.ncols();
    let mut best = 0;
    for k in 1..=r.min(m.nrows()) {
        if all_subsets_independent(m, k, rel_tol) {
            best = k;
        } else {
            break;
        }
    }
    best
}

fn all_subsets_independent(m: &DMatrix<f64>, k: usize, rel_tol: f64) -> bool {
    let r = m.ncols();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let sub = m.select_columns(idx.iter());
        if numerical_rank(&sub, rel_tol) < k {
            return false;
        }
        let Some(i) = (0..k).rev().find(|&i| idx[i] < r - k + i) else {
            return true;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
