//! Pooled local-linear kernel smoothing of means, (cross-)covariance
//! surfaces and the measurement-error variance.
//!
//! All smoothers use the Epanechnikov kernel. Points sharing a design
//! location are merged into one weighted point before fitting, which leaves
//! the local least-squares solution unchanged and keeps gridded designs cheap.
//! When a local window is degenerate the bandwidth is doubled for that
//! evaluation point only, at most [`MAX_WIDENINGS`] times.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const MAX_WIDENINGS: usize = 3;
/// Default bandwidth as a multiple of the mean gap between distinct times.
pub const BANDWIDTH_GAP_FACTOR: f64 = 1.5;
pub const DEFAULT_GRID_SIZE: usize = 51;
pub const DEFAULT_MIN_RAW_PAIRS: usize = 10;
pub const SIGMA2_FLOOR: f64 = 1e-12;

const DEGENERACY_TOL: f64 = 1e-10;

pub fn epanechnikov(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// `g` equispaced points spanning `domain`, endpoints included.
pub fn regular_grid(domain: (f64, f64), g: usize) -> Vec<f64> {
    assert!(g >= 2, "grid needs at least two points");
    let step = (domain.1 - domain.0) / (g - 1) as f64;
    (0..g)
        .map(|i| if i + 1 == g { domain.1 } else { domain.0 + step * i as f64 })
        .collect()
}

/// `BANDWIDTH_GAP_FACTOR ×` the mean gap between distinct sorted times.
pub fn default_bandwidth(times: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut t: Vec<f64> = times.into_iter().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    if t.len() < 2 {
        return None;
    }
    Some(BANDWIDTH_GAP_FACTOR * (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64)
}

/// Linear interpolation on a strictly increasing grid, constant outside.
pub fn interpolate(grid: &[f64], values: &[f64], t: f64) -> f64 {
    let n = grid.len();
    if t <= grid[0] {
        return values[0];
    }
    if t >= grid[n - 1] {
        return values[n - 1];
    }
    let hi = grid.partition_point(|&g| g < t);
    if grid[hi] == t {
        return values[hi];
    }
    let lo = hi - 1;
    let a = (t - grid[lo]) / (grid[hi] - grid[lo]);
    values[lo] * (1.0 - a) + values[hi] * a
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point1 {
    pub t: f64,
    pub y: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub s: f64,
    pub t: f64,
    pub y: f64,
    pub w: f64,
}

fn merge_1d(points: &[Point1]) -> Vec<Point1> {
    let mut sorted: Vec<Point1> = points.iter().copied().filter(|p| p.w > 0.0).collect();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut out: Vec<Point1> = Vec::with_capacity(sorted.len());
    for p in sorted {
        match out.last_mut() {
            Some(q) if q.t == p.t => {
                let w = q.w + p.w;
                q.y = (q.y * q.w + p.y * p.w) / w;
                q.w = w;
            }
            _ => out.push(p),
        }
    }
    out
}

fn fit_1d_at(points: &[Point1], s: f64, h: f64) -> Option<f64> {
    let lo = points.partition_point(|p| p.t <= s - h);
    let hi = points.partition_point(|p| p.t < s + h);
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in &points[lo..hi] {
        let d = p.t - s;
        let k = p.w * epanechnikov(d / h);
        s0 += k;
        s1 += k * d;
        s2 += k * d * d;
        t0 += k * p.y;
        t1 += k * d * p.y;
    }
    let det = s0 * s2 - s1 * s1;
    if s0 <= 0.0 || det <= DEGENERACY_TOL * s0 * s2 {
        return None;
    }
    Some((s2 * t0 - s1 * t1) / det)
}

/// Local-linear fit evaluated at each grid point.
pub fn local_linear_1d(points: &[Point1], h: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Invalid(format!("bandwidth {h} must be positive")));
    }
    let merged = merge_1d(points);
    grid.iter()
        .map(|&s| {
            let mut bw = h;
            for _ in 0..=MAX_WIDENINGS {
                if let Some(v) = fit_1d_at(&merged, s, bw) {
                    return Ok(v);
                }
                bw *= 2.0;
            }
            Err(Error::DegenerateWindow {
                at: format!("{s}"),
                bandwidth: bw / 2.0,
            })
        })
        .collect()
}

fn merge_2d(points: &[Point2]) -> Vec<Point2> {
    let mut sorted: Vec<Point2> = points.iter().copied().filter(|p| p.w > 0.0).collect();
    sorted.sort_by(|a, b| a.s.total_cmp(&b.s).then(a.t.total_cmp(&b.t)));
    let mut out: Vec<Point2> = Vec::with_capacity(sorted.len());
    for p in sorted {
        match out.last_mut() {
            Some(q) if q.s == p.s && q.t == p.t => {
                let w = q.w + p.w;
                q.y = (q.y * q.w + p.y * p.w) / w;
                q.w = w;
            }
            _ => out.push(p),
        }
    }
    out
}

fn fit_2d_at(points: &[Point2], a: f64, b: f64, h1: f64, h2: f64) -> Option<f64> {
    let lo = points.partition_point(|p| p.s <= a - h1);
    let hi = points.partition_point(|p| p.s < a + h1);
    let mut m = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for p in &points[lo..hi] {
        let dt = p.t - b;
        if dt.abs() >= h2 {
            continue;
        }
        let ds = p.s - a;
        let k = p.w * epanechnikov(ds / h1) * epanechnikov(dt / h2);
        if k == 0.0 {
            continue;
        }
        let x = Vector3::new(1.0, ds, dt);
        m += k * x * x.transpose();
        rhs += k * p.y * x;
    }
    if m[(0, 0)] <= 0.0 || m[(1, 1)] <= 0.0 || m[(2, 2)] <= 0.0 {
        return None;
    }
    let scale = Vector3::new(m[(0, 0)].sqrt(), m[(1, 1)].sqrt(), m[(2, 2)].sqrt());
    let scaled = Matrix3::from_fn(|i, j| m[(i, j)] / (scale[i] * scale[j]));
    if scaled.determinant() <= DEGENERACY_TOL {
        return None;
    }
    let beta = m.lu().solve(&rhs)?;
    Some(beta[0])
}

/// Local-plane fit at every node of `grid × grid`; entry `(g, h)` is the
/// estimate at `(grid[g], grid[h])`.
pub fn local_linear_2d(points: &[Point2], bandwidths: (f64, f64), grid: &[f64]) -> Result<DMatrix<f64>> {
    let (h1, h2) = bandwidths;
    if !(h1 > 0.0 && h2 > 0.0 && h1.is_finite() && h2.is_finite()) {
        return Err(Error::Invalid(format!("bandwidths {bandwidths:?} must be positive")));
    }
    let merged = merge_2d(points);
    smooth_merged_2d(&merged, h1, h2, grid, false)
}

/// Local fit of a plane plus a term quadratic in the distance across the
/// diagonal, `(ds − dt)²`. It still reproduces planes, and it follows the
/// ridge an auto-covariance has along `s = t`, where the raw diagonal is
/// excluded and a plane alone sits below the peak.
fn fit_ridge_at(points: &[Point2], a: f64, b: f64, h1: f64, h2: f64) -> Option<f64> {
    let lo = points.partition_point(|p| p.s <= a - h1);
    let hi = points.partition_point(|p| p.s < a + h1);
    let mut m = Matrix4::<f64>::zeros();
    let mut rhs = Vector4::<f64>::zeros();
    for p in &points[lo..hi] {
        let dt = p.t - b;
        if dt.abs() >= h2 {
            continue;
        }
        let ds = p.s - a;
        let k = p.w * epanechnikov(ds / h1) * epanechnikov(dt / h2);
        if k == 0.0 {
            continue;
        }
        let x = Vector4::new(1.0, ds, dt, (ds - dt) * (ds - dt));
        m += k * x * x.transpose();
        rhs += k * p.y * x;
    }
    if (0..4).any(|i| m[(i, i)] <= 0.0) {
        return None;
    }
    let scale = Vector4::from_fn(|i, _| m[(i, i)].sqrt());
    let scaled = Matrix4::from_fn(|i, j| m[(i, j)] / (scale[i] * scale[j]));
    if scaled.determinant() <= DEGENERACY_TOL {
        return None;
    }
    Some(m.lu().solve(&rhs)?[0])
}

fn smooth_merged_2d(merged: &[Point2], h1: f64, h2: f64, grid: &[f64], ridge: bool) -> Result<DMatrix<f64>> {
    let g = grid.len();
    let mut out = DMatrix::zeros(g, g);
    for (i, &a) in grid.iter().enumerate() {
        for (j, &b) in grid.iter().enumerate() {
            let (mut w1, mut w2) = (h1, h2);
            let mut value = None;
            for _ in 0..=MAX_WIDENINGS {
                if ridge {
                    value = fit_ridge_at(merged, a, b, w1, w2);
                }
                if value.is_none() {
                    value = fit_2d_at(merged, a, b, w1, w2);
                }
                if value.is_some() {
                    break;
                }
                w1 *= 2.0;
                w2 *= 2.0;
            }
            out[(i, j)] = value.ok_or_else(|| Error::DegenerateWindow {
                at: format!("({a}, {b})"),
                bandwidth: w1 / 2.0,
            })?;
        }
    }
    Ok(out)
}

/// Smoothed mean curves `m_j` on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanField {
    grid: Vec<f64>,
    /// Entry-major: curve `j` occupies `values[j*G .. (j+1)*G]`.
    values: Vec<f64>,
    bandwidths: Vec<f64>,
}

impl MeanField {
    pub fn new(grid: Vec<f64>, curves: Vec<Vec<f64>>, bandwidths: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("mean grid must be strictly increasing".into()));
        }
        if curves.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::Shape("mean curve length differs from grid".into()));
        }
        Ok(Self {
            grid,
            values: curves.concat(),
            bandwidths,
        })
    }

    /// Constant curves, one value per entry.
    pub fn constant(grid: Vec<f64>, levels: Vec<f64>) -> Self {
        let g = grid.len();
        let bandwidths = vec![0.0; levels.len()];
        let curves = levels.into_iter().map(|c| vec![c; g]).collect();
        Self::new(grid, curves, bandwidths).expect("valid constant mean")
    }

    pub fn zeros(grid: Vec<f64>, n_entries: usize) -> Self {
        Self::constant(grid, vec![0.0; n_entries])
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n_entries(&self) -> usize {
        self.values.len() / self.grid.len()
    }

    pub fn curve(&self, j: usize) -> &[f64] {
        let g = self.grid.len();
        &self.values[j * g..(j + 1) * g]
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn eval(&self, j: usize, t: f64) -> f64 {
        interpolate(&self.grid, self.curve(j), t)
    }
}

/// One smoothed (cross-)covariance surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceEstimate {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
    pub bandwidths: (f64, f64),
    pub raw_pairs: usize,
}

impl SurfaceEstimate {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "s,t,value")?;
        for (i, s) in self.grid.iter().enumerate() {
            for (j, t) in self.grid.iter().enumerate() {
                writeln!(f, "{s},{t},{}", self.values[(i, j)])?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

fn entry_points(d: &Dataset, j: usize, square: bool) -> Vec<Point1> {
    let mut pts = Vec::new();
    for s in d.samples() {
        for (k, &t) in s.times().iter().enumerate() {
            if let Some(y) = s.value(k, j) {
                pts.push(Point1 {
                    t,
                    y: if square { y * y } else { y },
                    w: 1.0,
                });
            }
        }
    }
    pts
}

/// Default per-entry mean bandwidths.
pub fn default_mean_bandwidths(d: &Dataset) -> Result<Vec<f64>> {
    (0..d.n_entries())
        .map(|j| {
            default_bandwidth(entry_points(d, j, false).into_iter().map(|p| p.t)).ok_or_else(|| {
                Error::EmptyEntry {
                    entry: d.entry_label(j),
                }
            })
        })
        .collect()
}

/// Default shared bandwidth for covariance surfaces and the variance diagonal.
pub fn default_covariance_bandwidth(d: &Dataset) -> Result<f64> {
    default_bandwidth(d.samples().iter().flat_map(|s| s.times().iter().copied()))
        .ok_or_else(|| Error::Invalid("fewer than two distinct observation times".into()))
}

/// Pools every observed `(t, y)` per entry and smooths it onto `grid`.
/// `bandwidth = None` uses the per-entry default.
pub fn estimate_mean(d: &Dataset, bandwidth: Option<f64>, grid: &[f64]) -> Result<MeanField> {
    let p = d.n_entries();
    let mut curves = Vec::with_capacity(p);
    let mut bws = Vec::with_capacity(p);
    for j in 0..p {
        let pts = entry_points(d, j, false);
        if pts.is_empty() {
            return Err(Error::EmptyEntry {
                entry: d.entry_label(j),
            });
        }
        let h = match bandwidth {
            Some(h) => h,
            None => default_bandwidth(pts.iter().map(|p| p.t)).ok_or_else(|| Error::EmptyEntry {
                entry: d.entry_label(j),
            })?,
        };
        curves.push(local_linear_1d(&pts, h, grid)?);
        bws.push(h);
    }
    MeanField::new(grid.to_vec(), curves, bws)
}

/// Raw products `y_j(t_k) y_k'(t_l)` pooled over samples, merged by design
/// location. Diagonal pairs `k == l` are dropped for auto-covariances.
/// Returns the merged points and the number of raw products.
pub fn raw_covariance_points(d: &Dataset, j: usize, jp: usize) -> (Vec<Point2>, usize) {
    let index = TimeIndex::new(d);
    index.raw_points(d, j, jp)
}

/// Distinct observation times of a dataset with each sample's times mapped
/// to their rank, so that raw products can be binned without sorting.
pub(crate) struct TimeIndex {
    times: Vec<f64>,
    positions: Vec<Vec<usize>>,
}

/// Above this many distinct times the dense bin table is replaced by sorting.
const DENSE_BIN_LIMIT: usize = 600;

impl TimeIndex {
    pub(crate) fn new(d: &Dataset) -> Self {
        let mut times: Vec<f64> = d.samples().iter().flat_map(|s| s.times().iter().copied()).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let positions = d
            .samples()
            .iter()
            .map(|s| {
                s.times()
                    .iter()
                    .map(|t| times.partition_point(|u| u < t))
                    .collect()
            })
            .collect();
        Self { times, positions }
    }

    pub(crate) fn raw_points(&self, d: &Dataset, j: usize, jp: usize) -> (Vec<Point2>, usize) {
        let u = self.times.len();
        if u > DENSE_BIN_LIMIT {
            return self.raw_points_sorted(d, j, jp);
        }
        let mut sum = vec![0.0; u * u];
        let mut count = vec![0usize; u * u];
        let mut total = 0;
        for (s, pos) in d.samples().iter().zip(&self.positions) {
            let n = s.n_times();
            for k in 0..n {
                let Some(a) = s.value(k, j) else { continue };
                for l in 0..n {
                    if j == jp && k == l {
                        continue;
                    }
                    if let Some(b) = s.value(l, jp) {
                        let cell = pos[k] * u + pos[l];
                        sum[cell] += a * b;
                        count[cell] += 1;
                        total += 1;
                    }
                }
            }
        }
        let mut pts = Vec::new();
        for a in 0..u {
            for b in 0..u {
                let c = count[a * u + b];
                if c > 0 {
                    pts.push(Point2 {
                        s: self.times[a],
                        t: self.times[b],
                        y: sum[a * u + b] / c as f64,
                        w: c as f64,
                    });
                }
            }
        }
        (pts, total)
    }

    fn raw_points_sorted(&self, d: &Dataset, j: usize, jp: usize) -> (Vec<Point2>, usize) {
        let mut pts = Vec::new();
        for s in d.samples() {
            let n = s.n_times();
            let times = s.times();
            for k in 0..n {
                let Some(a) = s.value(k, j) else { continue };
                for l in 0..n {
                    if j == jp && k == l {
                        continue;
                    }
                    if let Some(b) = s.value(l, jp) {
                        pts.push(Point2 {
                            s: times[k],
                            t: times[l],
                            y: a * b,
                            w: 1.0,
                        });
                    }
                }
            }
        }
        let count = pts.len();
        (merge_2d(&pts), count)
    }
}

/// Smoothed covariance between entries `j` and `jp` of a centered dataset.
pub fn estimate_pair_covariance(
    centered: &Dataset,
    j: usize,
    jp: usize,
    bandwidths: (f64, f64),
    grid: &[f64],
    min_pairs: usize,
) -> Result<SurfaceEstimate> {
    let (merged, count) = raw_covariance_points(centered, j, jp);
    smooth_raw_surface(centered, j, jp, merged, count, bandwidths, grid, min_pairs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn smooth_raw_surface(
    centered: &Dataset,
    j: usize,
    jp: usize,
    merged: Vec<Point2>,
    count: usize,
    bandwidths: (f64, f64),
    grid: &[f64],
    min_pairs: usize,
) -> Result<SurfaceEstimate> {
    if count < min_pairs {
        return Err(Error::InsufficientData {
            pair: format!("{}, {}", centered.entry_label(j), centered.entry_label(jp)),
            count,
            required: min_pairs,
        });
    }
    let (h1, h2) = bandwidths;
    if !(h1 > 0.0 && h2 > 0.0 && h1.is_finite() && h2.is_finite()) {
        return Err(Error::Invalid(format!("bandwidths {bandwidths:?} must be positive")));
    }
    let mut values = smooth_merged_2d(&merged, h1, h2, grid, j == jp)?;
    if j == jp {
        values = (&values + values.transpose()) * 0.5;
    }
    Ok(SurfaceEstimate {
        grid: grid.to_vec(),
        values,
        bandwidths,
        raw_pairs: count,
    })
}

/// Measurement-error variance from the gap between the smoothed raw
/// variance (diagonal pairs included) and the noise-free covariance diagonal.
/// `diagonals[j][g]` is the smoothed `Σ_jj(s_g, s_g)`.
pub fn estimate_sigma2(centered: &Dataset, diagonals: &[Vec<f64>], bandwidth: f64, grid: &[f64]) -> Result<f64> {
    let p = centered.n_entries();
    if diagonals.len() != p {
        return Err(Error::Shape(format!("{} diagonals for {p} entries", diagonals.len())));
    }
    let mut total = 0.0;
    for (j, diag) in diagonals.iter().enumerate() {
        let pts = entry_points(centered, j, true);
        if pts.is_empty() {
            return Err(Error::EmptyEntry {
                entry: centered.entry_label(j),
            });
        }
        let v = local_linear_1d(&pts, bandwidth, grid)?;
        let gap: f64 = v.iter().zip(diag).map(|(a, b)| a - b).sum::<f64>() / grid.len() as f64;
        total += gap;
    }
    let est = total / p as f64;
    if !est.is_finite() {
        return Err(Error::NonFinite("noise variance".into()));
    }
    Ok(est.max(SIGMA2_FLOOR))
}
