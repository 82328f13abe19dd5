//! Dense tensors and the matrix products used throughout the decomposition.
//!
//! Storage is "first index fastest": entry `(j_1, …, j_D)` lives at
//! `j_1 + p_1 (j_2 + p_2 (j_3 + …))`. With this layout the mode-0
//! matricization is the buffer itself read column-major, and the row index of
//! `A_D ⊙ … ⊙ A_1` coincides with the linear entry index.
//!
//! Modes are zero-based in this API.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("tensor order must be at least 1".into()));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-length mode in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn linear_index(&self, index: &[usize]) -> usize {
        linear_index(&self.shape, index)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.linear_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let k = self.linear_index(index);
        self.data[k] = value;
    }
}

/// Linear offset of a multi-index under the first-index-fastest layout.
pub fn linear_index(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    let mut k = 0;
    for d in (0..shape.len()).rev() {
        debug_assert!(index[d] < shape[d]);
        k = k * shape[d] + index[d];
    }
    k
}

/// Inverse of [`linear_index`].
pub fn multi_index(shape: &[usize], mut k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(shape.len());
    for &p in shape {
        out.push(k % p);
        k /= p;
    }
    out
}

/// Splits a linear entry index into the mode-`mode` index and the column of
/// the mode-`mode` matricization.
pub fn matricized_position(shape: &[usize], mode: usize, k: usize) -> (usize, usize) {
    let idx = multi_index(shape, k);
    let mut col = 0;
    let mut stride = 1;
    for (d, (&i, &p)) in idx.iter().zip(shape).enumerate() {
        if d != mode {
            col += i * stride;
            stride *= p;
        }
    }
    (idx[mode], col)
}

/// Linear entry index from a mode-`mode` row and matricization column.
pub fn entry_from_matricized(shape: &[usize], mode: usize, row: usize, mut col: usize) -> usize {
    let mut idx = vec![0; shape.len()];
    for (d, &p) in shape.iter().enumerate() {
        if d == mode {
            idx[d] = row;
        } else {
            idx[d] = col % p;
            col /= p;
        }
    }
    linear_index(shape, &idx)
}

fn check_mode(shape: &[usize], mode: usize) -> Result<()> {
    if mode >= shape.len() {
        return Err(Error::Invalid(format!(
            "mode {mode} out of range for order-{} tensor",
            shape.len()
        )));
    }
    Ok(())
}

/// Mode-`mode` matricization: a `p_mode × p_(-mode)` matrix whose columns are
/// the mode-`mode` fibers, remaining modes ordered lowest-first.
pub fn matricize(t: &DenseTensor, mode: usize) -> Result<DMatrix<f64>> {
    check_mode(&t.shape, mode)?;
    let rows = t.shape[mode];
    let cols = t.len() / rows;
    if mode == 0 {
        return Ok(DMatrix::from_column_slice(rows, cols, &t.data));
    }
    let mut out = DMatrix::zeros(rows, cols);
    for (k, &v) in t.data.iter().enumerate() {
        let (i, m) = matricized_position(&t.shape, mode, k);
        out[(i, m)] = v;
    }
    Ok(out)
}

pub fn inverse_matricize(m: &DMatrix<f64>, mode: usize, shape: &[usize]) -> Result<DenseTensor> {
    check_mode(shape, mode)?;
    let n: usize = shape.iter().product();
    if m.nrows() != shape[mode] || m.nrows() * m.ncols() != n {
        return Err(Error::Shape(format!(
            "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut data = vec![0.0; n];
    for (k, slot) in data.iter_mut().enumerate() {
        let (i, c) = matricized_position(shape, mode, k);
        *slot = m[(i, c)];
    }
    DenseTensor::new(shape.to_vec(), data)
}

/// Column-stacked mode-`mode` matricization.
pub fn vectorize(t: &DenseTensor, mode: usize) -> Result<Vec<f64>> {
    Ok(matricize(t, mode)?.as_slice().to_vec())
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (p, q) = b.shape();
    DMatrix::from_fn(a.nrows() * p, a.ncols() * q, |i, j| {
        a[(i / p, j / q)] * b[(i % p, j % q)]
    })
}

/// Column-wise Kronecker product; column `r` is `a_r ⊗ b_r`.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "Khatri-Rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let p = b.nrows();
    Ok(DMatrix::from_fn(a.nrows() * p, a.ncols(), |i, r| {
        a[(i / p, r)] * b[(i % p, r)]
    }))
}

pub fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "Hadamard needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.component_mul(b))
}

/// `A_D ⊙ … ⊙ A_1` for `factors = [A_1, …, A_D]`, skipping `skip` if given.
/// An empty product is the `1 × R` row of ones.
pub fn khatri_rao_reversed(factors: &[DMatrix<f64>], skip: Option<usize>, rank: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::from_element(1, rank, 1.0);
    for (d, a) in factors.iter().enumerate() {
        if Some(d) == skip {
            continue;
        }
        // acc holds A_{d-1} ⊙ … ⊙ A_1, so the new factor goes on the left.
        acc = khatri_rao(a, &acc).expect("factor ranks agree");
    }
    acc
}

/// Factor matrices `A_1 … A_D`, each `p_d × R`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    factors: Vec<DMatrix<f64>>,
}

impl FactorSet {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        let Some(first) = factors.first() else {
            return Err(Error::Shape("factor set needs at least one mode".into()));
        };
        let r = first.ncols();
        if r == 0 {
            return Err(Error::Shape("rank must be at least 1".into()));
        }
        if let Some(bad) = factors.iter().position(|a| a.ncols() != r) {
            return Err(Error::Shape(format!(
                "factor {bad} has {} columns, expected {r}",
                factors[bad].ncols()
            )));
        }
        Ok(Self { factors })
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.factors.iter().map(|a| a.nrows()).collect()
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<DMatrix<f64>> {
        self.factors
    }
}

/// `Σ_r w_r a_{1r} ∘ … ∘ a_{Dr}`.
pub fn cp_reconstruct(f: &FactorSet, weights: Option<&[f64]>) -> Result<DenseTensor> {
    let r = f.rank();
    if let Some(w) = weights {
        if w.len() != r {
            return Err(Error::Shape(format!("{} weights for rank {r}", w.len())));
        }
    }
    let kr = khatri_rao_reversed(f.factors(), None, r);
    let data = (0..kr.nrows())
        .map(|j| {
            (0..r)
                .map(|c| kr[(j, c)] * weights.map_or(1.0, |w| w[c]))
                .sum()
        })
        .collect();
    DenseTensor::new(f.shape(), data)
}

pub fn frobenius_norm(t: &DenseTensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}
