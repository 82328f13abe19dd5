//! Irregularly sampled tensor-valued longitudinal observations.
//!
//! Each sample carries its own observation times and, at every time, one
//! tensor slice with a per-entry observed mask. Entries are addressed by the
//! linear index of [`crate::tensor::linear_index`] (first mode fastest).
//!
//! The CSV layout is long format: `sample_id,time,<entry columns…>` where each
//! entry column is named by its one-based multi-index `j1.j2.….jD`. An empty
//! cell is a missing observation. An optional JSON sidecar next to the file
//! (same stem, `.json` extension) may fix the domain and the tensor shape.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothing::MeanField;
use crate::tensor::{linear_index, multi_index};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalSample {
    id: String,
    times: Vec<f64>,
    /// `times.len() × P` values, slice-major. Missing cells hold 0.
    values: Vec<f64>,
    observed: Vec<bool>,
}

impl LongitudinalSample {
    /// Builds a sample from per-time slices where `None` marks a missing entry.
    pub fn new(id: impl Into<String>, times: Vec<f64>, slices: Vec<Vec<Option<f64>>>) -> Result<Self> {
        let id = id.into();
        if times.is_empty() {
            return Err(Error::Sample {
                sample: id,
                message: "no observation times".into(),
            });
        }
        if times.len() != slices.len() {
            return Err(Error::Sample {
                sample: id,
                message: format!("{} times but {} slices", times.len(), slices.len()),
            });
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Sample {
                sample: id,
                message: "times must be finite and strictly increasing".into(),
            });
        }
        let p = slices[0].len();
        let mut values = Vec::with_capacity(times.len() * p);
        let mut observed = Vec::with_capacity(times.len() * p);
        for s in &slices {
            if s.len() != p {
                return Err(Error::Sample {
                    sample: id,
                    message: "slices have different sizes".into(),
                });
            }
            for v in s {
                match v {
                    Some(x) if !x.is_finite() => {
                        return Err(Error::Sample {
                            sample: id,
                            message: format!("non-finite value {x}"),
                        })
                    }
                    Some(x) => {
                        values.push(*x);
                        observed.push(true);
                    }
                    None => {
                        values.push(0.0);
                        observed.push(false);
                    }
                }
            }
        }
        Ok(Self {
            id,
            times,
            values,
            observed,
        })
    }

    /// Fully observed sample from dense slices.
    pub fn dense(id: impl Into<String>, times: Vec<f64>, slices: Vec<Vec<f64>>) -> Result<Self> {
        let slices = slices
            .into_iter()
            .map(|s| s.into_iter().map(Some).collect())
            .collect();
        Self::new(id, times, slices)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_entries(&self) -> usize {
        self.values.len() / self.times.len()
    }

    pub fn value(&self, k: usize, j: usize) -> Option<f64> {
        let idx = k * self.n_entries() + j;
        self.observed[idx].then(|| self.values[idx])
    }

    pub fn is_observed(&self, k: usize, j: usize) -> bool {
        self.observed[k * self.n_entries() + j]
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Number of times with at least one observed entry.
    pub fn n_observed_times(&self) -> usize {
        let p = self.n_entries();
        self.observed
            .chunks(p)
            .filter(|s| s.iter().any(|&o| o))
            .count()
    }

    /// Observed `(time index, entry)` pairs, entry-major with time fastest.
    pub fn observed_pairs(&self) -> Vec<(usize, usize)> {
        let p = self.n_entries();
        let mut out = Vec::with_capacity(self.n_observed());
        for j in 0..p {
            for k in 0..self.n_times() {
                if self.is_observed(k, j) {
                    out.push((k, j));
                }
            }
        }
        out
    }

    pub(crate) fn set_missing(&mut self, k: usize, j: usize) {
        let idx = k * self.n_entries() + j;
        self.observed[idx] = false;
        self.values[idx] = 0.0;
    }

    pub(crate) fn map_observed(&mut self, mut f: impl FnMut(usize, usize, f64) -> f64) {
        let p = self.n_entries();
        for k in 0..self.n_times() {
            for j in 0..p {
                let idx = k * p + j;
                if self.observed[idx] {
                    self.values[idx] = f(k, j, self.values[idx]);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<LongitudinalSample>,
    shape: Vec<usize>,
    domain: (f64, f64),
}

/// Optional metadata stored beside a CSV file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
}

impl Dataset {
    /// Validates and assembles a dataset. When `domain` is `None` it is the
    /// span of all observation times.
    pub fn new(samples: Vec<LongitudinalSample>, shape: Vec<usize>, domain: Option<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("dataset has no samples".into()));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("invalid tensor shape {shape:?}")));
        }
        let p: usize = shape.iter().product();
        for s in &samples {
            if s.n_entries() != p {
                return Err(Error::Sample {
                    sample: s.id.clone(),
                    message: format!("slices have {} entries, shape {shape:?} needs {p}", s.n_entries()),
                });
            }
        }
        if !samples.iter().any(|s| s.n_times() >= 2) {
            return Err(Error::Invalid("no sample has two or more observation times".into()));
        }
        let domain = match domain {
            Some(d) => d,
            None => {
                let lo = samples.iter().map(|s| s.times[0]).fold(f64::INFINITY, f64::min);
                let hi = samples
                    .iter()
                    .map(|s| *s.times.last().unwrap())
                    .fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        };
        if !(domain.0.is_finite() && domain.1.is_finite() && domain.0 < domain.1) {
            return Err(Error::Invalid(format!("invalid domain {domain:?}")));
        }
        let slack = 1e-12 * (domain.1 - domain.0);
        for s in &samples {
            if s.times[0] < domain.0 - slack || *s.times.last().unwrap() > domain.1 + slack {
                return Err(Error::Sample {
                    sample: s.id.clone(),
                    message: format!("times outside domain {domain:?}"),
                });
            }
        }
        Ok(Self {
            samples,
            shape,
            domain,
        })
    }

    pub fn samples(&self) -> &[LongitudinalSample] {
        &self.samples
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Number of functional entries `P`.
    pub fn n_entries(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn n_observed(&self) -> usize {
        self.samples.iter().map(|s| s.n_observed()).sum()
    }

    /// Sub-dataset with the given sample indices, keeping shape and domain.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples, self.shape.clone(), Some(self.domain))
    }

    /// One-based multi-index label of an entry, e.g. `2.1`.
    pub fn entry_label(&self, j: usize) -> String {
        entry_label(&self.shape, j)
    }
}

pub fn entry_label(shape: &[usize], j: usize) -> String {
    multi_index(shape, j)
        .iter()
        .map(|i| (i + 1).to_string())
        .collect::<Vec<_>>()
        .join(".")
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Loads a long-format CSV, picking up the sidecar if one exists.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let side = sidecar_path(path);
    let sidecar = if side.exists() && side != path {
        Some(serde_json::from_str::<Sidecar>(&std::fs::read_to_string(&side)?)?)
    } else {
        None
    };
    load_csv_with(path, sidecar.as_ref())
}

pub fn load_csv_with(path: &Path, sidecar: Option<&Sidecar>) -> Result<Dataset> {
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "sample_id" || &headers[1] != "time" {
        return Err(parse_err(
            1,
            headers.get(0).unwrap_or(""),
            "header must start with sample_id,time followed by entry columns".into(),
        ));
    }
    let mut indices: Vec<Vec<usize>> = Vec::new();
    for name in headers.iter().skip(2) {
        let idx: std::result::Result<Vec<usize>, _> = name.split('.').map(|s| s.trim().parse::<usize>()).collect();
        match idx {
            Ok(v) if !v.is_empty() && v.iter().all(|&i| i >= 1) => {
                indices.push(v.into_iter().map(|i| i - 1).collect())
            }
            _ => return Err(parse_err(1, name, "malformed entry multi-index".into())),
        }
    }
    let order = indices[0].len();
    if let Some(k) = indices.iter().position(|v| v.len() != order) {
        return Err(parse_err(1, &headers[k + 2], format!("expected {order} indices")));
    }
    let shape: Vec<usize> = match sidecar.and_then(|s| s.shape.clone()) {
        Some(s) => s,
        None => (0..order)
            .map(|d| indices.iter().map(|v| v[d] + 1).max().unwrap())
            .collect(),
    };
    if shape.len() != order {
        return Err(parse_err(1, "", format!("sidecar shape {shape:?} has wrong order")));
    }
    let p: usize = shape.iter().product();
    let mut column_entry = Vec::with_capacity(indices.len());
    let mut seen = vec![false; p];
    for (c, v) in indices.iter().enumerate() {
        if v.iter().zip(&shape).any(|(&i, &n)| i >= n) {
            return Err(parse_err(1, &headers[c + 2], format!("index outside shape {shape:?}")));
        }
        let j = linear_index(&shape, v);
        if seen[j] {
            return Err(parse_err(1, &headers[c + 2], "duplicate entry column".into()));
        }
        seen[j] = true;
        column_entry.push(j);
    }
    if let Some(j) = seen.iter().position(|&s| !s) {
        return Err(parse_err(1, "", format!("missing column for entry {}", entry_label(&shape, j))));
    }

    let mut order_of: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<(f64, Vec<Option<f64>>, usize)>> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(parse_err(row, "", format!("expected {} fields, got {}", headers.len(), rec.len())));
        }
        let id = rec[0].to_string();
        let t: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(row, "time", format!("non-numeric time {:?}", &rec[1])))?;
        if !t.is_finite() {
            return Err(parse_err(row, "time", "non-finite time".into()));
        }
        let mut slice = vec![None; p];
        for (c, &j) in column_entry.iter().enumerate() {
            let cell = rec[c + 2].trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, &headers[c + 2], format!("non-numeric cell {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, &headers[c + 2], "non-finite value".into()));
            }
            slice[j] = Some(v);
        }
        let si = *order_of.entry(id.clone()).or_insert_with(|| {
            ids.push(id.clone());
            rows.push(Vec::new());
            ids.len() - 1
        });
        rows[si].push((t, slice, row));
    }
    if ids.is_empty() {
        return Err(parse_err(2, "", "no data rows".into()));
    }

    let mut samples = Vec::with_capacity(ids.len());
    for (id, mut obs) in ids.into_iter().zip(rows) {
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(parse_err(w[1].2, "time", format!("duplicate time {} for sample {id}", w[1].0)));
        }
        let (times, slices): (Vec<f64>, Vec<Vec<Option<f64>>>) = obs.into_iter().map(|(t, s, _)| (t, s)).unzip();
        samples.push(LongitudinalSample::new(id, times, slices)?);
    }
    let domain = sidecar.and_then(|s| s.domain).map(|d| (d[0], d[1]));
    Dataset::new(samples, shape, domain)
}

/// Writes the dataset in the long CSV layout. Values use the shortest
/// round-trip representation, so reloading is exact.
pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let p = d.n_entries();
    let mut header = vec!["sample_id".to_string(), "time".to_string()];
    header.extend((0..p).map(|j| d.entry_label(j)));
    w.write_record(&header)?;
    for s in &d.samples {
        for (k, &t) in s.times.iter().enumerate() {
            let mut rec = vec![s.id.clone(), t.to_string()];
            rec.extend((0..p).map(|j| s.value(k, j).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the CSV plus a sidecar recording the domain and shape.
pub fn write_csv_with_sidecar(d: &Dataset, path: &Path) -> Result<()> {
    write_csv(d, path)?;
    let side = Sidecar {
        domain: Some([d.domain.0, d.domain.1]),
        shape: Some(d.shape.clone()),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsifyMode {
    /// Remove individual tensor entries.
    #[default]
    Entry,
    /// Remove whole slices (all entries at one time).
    Slice,
}

/// Removes `floor(s · observed)` observations uniformly at random while
/// keeping at least two observed times in every sample.
pub fn sparsify(d: &Dataset, proportion: f64, seed: u64, mode: SparsifyMode) -> Result<Dataset> {
    if !(0.0..1.0).contains(&proportion) {
        return Err(Error::Invalid(format!("sparsity {proportion} must lie in [0, 1)")));
    }
    let mut out = d.clone();
    if proportion == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = d.n_entries();

    // Candidate units: (sample, time, entry) or (sample, time).
    let mut units: Vec<(usize, usize, Option<usize>)> = Vec::new();
    for (i, s) in d.samples.iter().enumerate() {
        for k in 0..s.n_times() {
            match mode {
                SparsifyMode::Entry => {
                    units.extend((0..p).filter(|&j| s.is_observed(k, j)).map(|j| (i, k, Some(j))))
                }
                SparsifyMode::Slice => {
                    if (0..p).any(|j| s.is_observed(k, j)) {
                        units.push((i, k, None));
                    }
                }
            }
        }
    }
    let target = (proportion * units.len() as f64).floor() as usize;
    units.shuffle(&mut rng);

    let mut per_time: Vec<Vec<usize>> = d
        .samples
        .iter()
        .map(|s| (0..s.n_times()).map(|k| (0..p).filter(|&j| s.is_observed(k, j)).count()).collect())
        .collect();
    let mut live_times: Vec<usize> = per_time.iter().map(|c| c.iter().filter(|&&n| n > 0).count()).collect();

    let mut removed = 0;
    for (i, k, j) in units {
        if removed == target {
            break;
        }
        let drop = match j {
            Some(_) => 1,
            None => per_time[i][k],
        };
        let empties_time = per_time[i][k] == drop;
        if empties_time && live_times[i] <= 2 {
            continue;
        }
        match j {
            Some(j) => out.samples[i].set_missing(k, j),
            None => (0..p).for_each(|j| out.samples[i].set_missing(k, j)),
        }
        per_time[i][k] -= drop;
        if empties_time {
            live_times[i] -= 1;
        }
        removed += 1;
    }
    if removed < target {
        return Err(Error::Invalid(format!(
            "cannot remove {target} observations while keeping two observed times per sample"
        )));
    }
    Ok(out)
}

/// Subtracts the mean field at each observed `(time, entry)`.
pub fn center(d: &Dataset, mean: &MeanField) -> Result<Dataset> {
    if mean.n_entries() != d.n_entries() {
        return Err(Error::Shape(format!(
            "mean field has {} entries, dataset {}",
            mean.n_entries(),
            d.n_entries()
        )));
    }
    let mut out = d.clone();
    for s in &mut out.samples {
        let times = s.times.clone();
        s.map_observed(|k, j, v| v - mean.eval(j, times[k]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let a = LongitudinalSample::dense("a", vec![0.0, 1.0], vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        Dataset::new(vec![a], vec![2], None).unwrap()
    }

    #[test]
    fn smallest_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "sample_id,time,1,2\na,0,1,2\na,1,3,4\n").unwrap();
        let d = load_csv(&path).unwrap();
        assert_eq!(d, toy());
        assert_eq!(d.samples()[0].n_times(), 2);
        assert_eq!(d.n_observed(), 4);
        assert_eq!(d.domain(), (0.0, 1.0));
    }

    #[test]
    fn empty_cell_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "sample_id,time,1,2\na,1,3,\na,0,1,2\n").unwrap();
        let d = load_csv(&path).unwrap();
        let s = &d.samples()[0];
        assert_eq!(s.times(), &[0.0, 1.0]);
        assert!(!s.is_observed(1, 1));
        assert_eq!(s.value(1, 0), Some(3.0));
    }

    #[test]
    fn load_errors_name_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "sample_id,time,1,x.2\na,0,1,2\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { column, row, .. }) => {
                assert_eq!(column, "x.2");
                assert_eq!(row, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "sample_id,time,1,2\na,0,1,oops\na,1,1,1\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { column, row, .. }) => {
                assert_eq!(column, "2");
                assert_eq!(row, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, "sample_id,time,1,2\na,0,1,2\na,0,1,1\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn sidecar_sets_domain_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "sample_id,time,1.1,2.1\na,0,1,2\na,1,3,4\n").unwrap();
        std::fs::write(sidecar_path(&path), r#"{"domain":[-1,2],"shape":[2,1]}"#).unwrap();
        let d = load_csv(&path).unwrap();
        assert_eq!(d.domain(), (-1.0, 2.0));
        assert_eq!(d.shape(), &[2, 1]);
    }

    #[test]
    fn sparsify_zero_and_determinism() {
        let d = toy();
        assert_eq!(sparsify(&d, 0.0, 1, SparsifyMode::Entry).unwrap(), d);
        assert!(sparsify(&d, 1.0, 1, SparsifyMode::Entry).is_err());
    }

    #[test]
    fn center_with_constant_mean() {
        let d = toy();
        let mean = MeanField::constant(vec![0.0, 0.5, 1.0], vec![2.0, 2.0]);
        let c = center(&d, &mean).unwrap();
        assert_eq!(c.samples()[0].value(0, 0), Some(-1.0));
        assert_eq!(c.samples()[0].value(1, 1), Some(2.0));
        let zero = MeanField::constant(vec![0.0, 1.0], vec![0.0, 0.0]);
        assert_eq!(center(&d, &zero).unwrap(), d);
    }
}
