//! Full functional covariance on the quadrature grid and its collapsed views.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{center, Dataset};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::smoothing::{
    default_covariance_bandwidth, estimate_mean, estimate_sigma2, regular_grid, smooth_raw_surface, MeanField,
    SurfaceEstimate, TimeIndex, DEFAULT_GRID_SIZE, DEFAULT_MIN_RAW_PAIRS,
};
use crate::tensor::entry_from_matricized;

/// Trapezoidal rule on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.nodes[0], self.nodes[self.nodes.len() - 1])
    }
}

pub fn quadrature(domain: (f64, f64), g: usize) -> Result<QuadratureRule> {
    if g < 2 {
        return Err(Error::Invalid(format!("grid size {g} must be at least 2")));
    }
    if !(domain.0.is_finite() && domain.1.is_finite() && domain.0 < domain.1) {
        return Err(Error::Invalid(format!("invalid domain {domain:?}")));
    }
    Ok(trapezoid(regular_grid(domain, g)))
}

/// Trapezoidal weights for an arbitrary increasing node set.
pub fn trapezoid(nodes: Vec<f64>) -> QuadratureRule {
    let g = nodes.len();
    let mut weights = vec![0.0; g];
    for i in 0..g - 1 {
        let half = 0.5 * (nodes[i + 1] - nodes[i]);
        weights[i] += half;
        weights[i + 1] += half;
    }
    QuadratureRule { nodes, weights }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovarianceConfig {
    pub grid_size: usize,
    /// Mean bandwidth; `None` picks a per-entry default.
    pub bandwidth_mean: Option<f64>,
    /// Shared covariance bandwidth; `None` picks the pooled default.
    pub bandwidth_cov: Option<f64>,
    pub min_raw_pairs: usize,
    /// Truncate negative eigenvalues of the assembled field at zero.
    pub psd_projection: bool,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            bandwidth_mean: None,
            bandwidth_cov: None,
            min_raw_pairs: DEFAULT_MIN_RAW_PAIRS,
            psd_projection: true,
        }
    }
}

/// Smoothed covariance `Σ_jk(s_g, s_h)` for every grid pair and entry pair,
/// together with the noise variance and mean curves it was built from.
///
/// Stored as a symmetric `GP × GP` matrix whose row `g·P + j` and column
/// `h·P + k` hold `Σ_jk(s_g, s_h)`.
#[derive(Debug, Clone)]
pub struct CovarianceField {
    quad: QuadratureRule,
    shape: Vec<usize>,
    full: DMatrix<f64>,
    sigma2: f64,
    mean: MeanField,
    bandwidth: f64,
}

impl CovarianceField {
    pub fn new(
        quad: QuadratureRule,
        shape: Vec<usize>,
        full: DMatrix<f64>,
        sigma2: f64,
        mean: MeanField,
        bandwidth: f64,
    ) -> Result<Self> {
        let p: usize = shape.iter().product();
        let n = quad.len() * p;
        if full.nrows() != n || full.ncols() != n {
            return Err(Error::Shape(format!(
                "covariance is {}x{}, expected {n}x{n}",
                full.nrows(),
                full.ncols()
            )));
        }
        if full.iter().any(|v| !v.is_finite()) || !sigma2.is_finite() {
            return Err(Error::NonFinite("covariance field".into()));
        }
        if mean.n_entries() != p || mean.grid() != quad.nodes.as_slice() {
            return Err(Error::Shape("mean field does not match covariance grid".into()));
        }
        Ok(Self {
            quad,
            shape,
            full,
            sigma2,
            mean,
            bandwidth,
        })
    }

    /// Builds a field from a covariance function `f(g, h, j, k)`; only
    /// `g·P+j ≤ h·P+k` is evaluated and mirrored.
    pub fn from_fn(
        quad: QuadratureRule,
        shape: Vec<usize>,
        sigma2: f64,
        mean: MeanField,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let p: usize = shape.iter().product();
        let n = quad.len() * p;
        let mut full = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in a..n {
                let v = f(a / p, b / p, a % p, b % p);
                full[(a, b)] = v;
                full[(b, a)] = v;
            }
        }
        Self::new(quad, shape, full, sigma2, mean, 0.0)
    }

    /// Nearest PSD field in the quadrature inner product: the eigenvalues of
    /// `W^{1/2} Σ W^{1/2}` are truncated at zero. Returns how many were
    /// negative beyond roundoff; the field is left untouched when none are.
    pub fn project_psd(&mut self) -> usize {
        let p = self.n_entries();
        let root: Vec<f64> = (0..self.full.nrows()).map(|a| self.quad.weights[a / p].sqrt()).collect();
        let n = root.len();
        let scaled = DMatrix::from_fn(n, n, |a, b| root[a] * root[b] * self.full[(a, b)]);
        let eig = nalgebra::SymmetricEigen::new(scaled);
        let tol = 1e-12 * eig.eigenvalues.amax();
        let dropped = eig.eigenvalues.iter().filter(|&&v| v < -tol).count();
        if dropped == 0 {
            return 0;
        }
        let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.0).collect();
        let v = eig.eigenvectors.select_columns(&keep);
        let vs = DMatrix::from_fn(n, keep.len(), |a, c| v[(a, c)] * eig.eigenvalues[keep[c]].sqrt() / root[a]);
        self.full = symmetrize(&(&vs * vs.transpose()));
        dropped
    }

    pub fn quadrature(&self) -> &QuadratureRule {
        &self.quad
    }

    pub fn grid(&self) -> &[f64] {
        &self.quad.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.quad.weights
    }

    pub fn grid_size(&self) -> usize {
        self.quad.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n_entries(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn mean(&self) -> &MeanField {
        &self.mean
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// The `GP × GP` matrix described on the type.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn get(&self, g: usize, h: usize, j: usize, k: usize) -> f64 {
        let p = self.n_entries();
        self.full[(g * p + j, h * p + k)]
    }

    /// The `P × P` slab at `(s_g, s_h)`.
    pub fn slab(&self, g: usize, h: usize) -> DMatrix<f64> {
        let p = self.n_entries();
        self.full.view((g * p, h * p), (p, p)).into_owned()
    }

    /// Row-major vectorization of the slab at `(s_g, s_h)` (length `P²`).
    pub fn collapse_f(&self, g: usize, h: usize) -> Vec<f64> {
        let p = self.n_entries();
        let mut out = Vec::with_capacity(p * p);
        for j in 0..p {
            for k in 0..p {
                out.push(self.get(g, h, j, k));
            }
        }
        out
    }

    /// Mode-`mode` collapse at `(s_g, s_h)`: entry `[i, m·P + k]` is
    /// `Σ(X_(mode)[i, m], x[k])`. Modes are zero-based.
    pub fn collapse_d(&self, mode: usize, g: usize, h: usize) -> Result<DMatrix<f64>> {
        if mode >= self.shape.len() {
            return Err(Error::Invalid(format!(
                "mode {mode} out of range for order {}",
                self.shape.len()
            )));
        }
        let p = self.n_entries();
        let pd = self.shape[mode];
        let rest = p / pd;
        let mut out = DMatrix::zeros(pd, rest * p);
        for i in 0..pd {
            for m in 0..rest {
                let j = entry_from_matricized(&self.shape, mode, i, m);
                for k in 0..p {
                    out[(i, m * p + k)] = self.get(g, h, j, k);
                }
            }
        }
        Ok(out)
    }

    /// Largest violation of `Σ_jk(s,t) = Σ_kj(t,s)`.
    pub fn symmetry_error(&self) -> f64 {
        (&self.full - self.full.transpose()).amax()
    }

    /// Auto-covariance diagonal `Σ_jj(s_g, s_g)` for each entry.
    pub fn diagonals(&self) -> Vec<Vec<f64>> {
        let p = self.n_entries();
        (0..p)
            .map(|j| (0..self.grid_size()).map(|g| self.get(g, g, j, j)).collect())
            .collect()
    }

    /// Writes the field in a little-endian binary format.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        let g = self.grid_size();
        let p = self.n_entries();
        write_u64(&mut f, self.shape.len() as u64)?;
        for &s in &self.shape {
            write_u64(&mut f, s as u64)?;
        }
        write_u64(&mut f, g as u64)?;
        write_f64s(&mut f, &self.quad.nodes)?;
        write_f64s(&mut f, &self.quad.weights)?;
        write_f64s(&mut f, &[self.sigma2, self.bandwidth])?;
        write_f64s(&mut f, self.mean.bandwidths())?;
        for j in 0..p {
            write_f64s(&mut f, self.mean.curve(j))?;
        }
        write_f64s(&mut f, self.full.as_slice())?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Invalid(format!("{}: not a covariance cache", path.display())));
        }
        let order = read_u64(&mut f)? as usize;
        if order == 0 || order > 16 {
            return Err(Error::Invalid(format!("{}: corrupt header", path.display())));
        }
        let shape = (0..order)
            .map(|_| read_u64(&mut f).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let g = read_u64(&mut f)? as usize;
        let p: usize = shape.iter().product();
        let nodes = read_f64s(&mut f, g)?;
        let weights = read_f64s(&mut f, g)?;
        let scalars = read_f64s(&mut f, 2)?;
        let mean_bw = read_f64s(&mut f, p)?;
        let curves = (0..p).map(|_| read_f64s(&mut f, g)).collect::<Result<Vec<_>>>()?;
        let data = read_f64s(&mut f, g * p * g * p)?;
        let mean = MeanField::new(nodes.clone(), curves, mean_bw)?;
        Self::new(
            QuadratureRule { nodes, weights },
            shape,
            DMatrix::from_vec(g * p, g * p, data),
            scalars[0],
            mean,
            scalars[1],
        )
    }
}

const MAGIC: &[u8; 8] = b"LFPCOV01";

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Mean, centering, every pair surface and the noise variance.
pub fn assemble(d: &Dataset, cfg: &CovarianceConfig) -> Result<CovarianceField> {
    let quad = quadrature(d.domain(), cfg.grid_size)?;
    let mean = estimate_mean(d, cfg.bandwidth_mean, &quad.nodes)?;
    assemble_with_mean(d, mean, quad, cfg)
}

/// As [`assemble`], with the mean curves supplied.
pub fn assemble_with_mean(
    d: &Dataset,
    mean: MeanField,
    quad: QuadratureRule,
    cfg: &CovarianceConfig,
) -> Result<CovarianceField> {
    let centered = center(d, &mean)?;
    let h = match cfg.bandwidth_cov {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Invalid(format!("covariance bandwidth {h} must be positive"))),
        None => default_covariance_bandwidth(d)?,
    };
    let surfaces = pair_surfaces(&centered, h, &quad.nodes, cfg.min_raw_pairs)?;
    let p = d.n_entries();
    let g = quad.len();
    let mut full = DMatrix::zeros(g * p, g * p);
    for ((j, k), s) in &surfaces {
        for a in 0..g {
            for b in 0..g {
                let v = s.values[(a, b)];
                full[(a * p + j, b * p + k)] = v;
                full[(b * p + k, a * p + j)] = v;
            }
        }
    }
    let diagonals: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..g).map(|a| full[(a * p + j, a * p + j)]).collect())
        .collect();
    let sigma2 = estimate_sigma2(&centered, &diagonals, h, &quad.nodes)?;
    let mut field = CovarianceField::new(quad, d.shape().to_vec(), full, sigma2, mean, h)?;
    if cfg.psd_projection {
        let dropped = field.project_psd();
        log::debug!("PSD projection removed {dropped} negative eigenvalues");
    }
    Ok(field)
}

/// All `j ≤ k` surfaces, computed in parallel and returned in pair order.
pub fn pair_surfaces(
    centered: &Dataset,
    h: f64,
    grid: &[f64],
    min_pairs: usize,
) -> Result<Vec<((usize, usize), SurfaceEstimate)>> {
    let p = centered.n_entries();
    let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j..p).map(move |k| (j, k))).collect();
    let index = TimeIndex::new(centered);
    pairs
        .par_iter()
        .map(|&(j, k)| {
            let (merged, count) = index.raw_points(centered, j, k);
            smooth_raw_surface(centered, j, k, merged, count, (h, h), grid, min_pairs).map(|s| ((j, k), s))
        })
        .collect()
}
