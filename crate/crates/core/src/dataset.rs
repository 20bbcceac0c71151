//! Multi-view data: loading, validation, synthetic generation, splitting and
//! zero-padded stacking.
//!
//! On disk every view is sample-major CSV (one row per sample). In memory each
//! view is feature-major, `D_m x n`, so sample `i` of view `m` is column `i`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `V` column-aligned feature matrices plus optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<DMatrix<f64>>,
    labels: Option<Vec<usize>>,
}

impl MultiViewDataset {
    /// Builds a dataset from feature-major views (`D_m x n` each).
    pub fn new(views: Vec<DMatrix<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Size(format!("need at least 2 views, got {}", views.len())));
        }
        let n = views[0].ncols();
        for (m, x) in views.iter().enumerate() {
            if x.ncols() != n {
                return Err(Error::Alignment(format!(
                    "view {m} has {} samples, view 0 has {n}",
                    x.ncols()
                )));
            }
            if x.nrows() == 0 {
                return Err(Error::Size(format!("view {m} has no features")));
            }
            if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
                let (row, col) = (pos % x.nrows(), pos / x.nrows());
                return Err(Error::Numeric(format!("view {m}, feature {row}, sample {col}")));
            }
        }
        if n < 2 {
            return Err(Error::Size(format!("need at least 2 samples, got {n}")));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Alignment(format!("{} labels for {n} samples", l.len())));
            }
        }
        Ok(Self { views, labels })
    }

    pub fn views(&self) -> &[DMatrix<f64>] {
        &self.views
    }

    pub fn view(&self, m: usize) -> &DMatrix<f64> {
        &self.views[m]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].ncols()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|x| x.nrows()).collect()
    }

    /// `D = sum_m D_m`.
    pub fn total_dim(&self) -> usize {
        self.views.iter().map(|x| x.nrows()).sum()
    }

    /// Row offset of each view inside the stacked `D`-dimensional space.
    pub fn offsets(&self) -> Vec<usize> {
        block_offsets(&self.view_dims())
    }

    /// Class id -> member count, ordered by class id.
    pub fn class_counts(&self) -> Option<BTreeMap<usize, usize>> {
        self.labels.as_ref().map(|l| {
            let mut counts = BTreeMap::new();
            for &c in l {
                *counts.entry(c).or_insert(0) += 1;
            }
            counts
        })
    }

    /// Keeps the given sample columns (in the given order) in every view.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.n_samples();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("sample {bad} of {n}")));
        }
        let views = self.views.iter().map(|x| x.select_columns(indices)).collect();
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self { views, labels })
    }

    /// Per-feature standardization to zero mean and unit (population)
    /// variance. Constant features are only centered.
    pub fn standardized(&self) -> Self {
        let views = self
            .views
            .iter()
            .map(|x| {
                let n = x.ncols() as f64;
                let mut out = x.clone();
                for mut row in out.row_iter_mut() {
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let sd = var.sqrt();
                    for v in row.iter_mut() {
                        *v -= mean;
                        if sd > 0.0 {
                            *v /= sd;
                        }
                    }
                }
                out
            })
            .collect();
        Self {
            views,
            labels: self.labels.clone(),
        }
    }
}

pub(crate) fn block_offsets(dims: &[usize]) -> Vec<usize> {
    dims.iter()
        .scan(0, |acc, &d| {
            let start = *acc;
            *acc += d;
            Some(start)
        })
        .collect()
}

/// View `m` embedded in the stacked feature space, zero outside its block.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedViewMatrix {
    pub data: DMatrix<f64>,
    pub source_view: usize,
    pub offset: usize,
}

/// `[0; ...; X^m; ...; 0]`, with `m` zero-based.
pub fn stack_padded(ds: &MultiViewDataset, m: usize) -> Result<PaddedViewMatrix> {
    if m >= ds.n_views() {
        return Err(Error::Index(format!("view {m} of {}", ds.n_views())));
    }
    let offset = ds.offsets()[m];
    let x = ds.view(m);
    let mut data = DMatrix::zeros(ds.total_dim(), ds.n_samples());
    data.view_mut((offset, 0), (x.nrows(), x.ncols())).copy_from(x);
    Ok(PaddedViewMatrix {
        data,
        source_view: m,
        offset,
    })
}

/// Per-class training size and the seed pair that fixes the draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub per_class: usize,
    pub seed: u64,
    pub repeat_index: u64,
}

/// RNG for repeat `r` of an experiment seeded with `seed`: ChaCha8 keyed by
/// `seed` on stream `r`, so every repeat is reproducible on its own.
pub fn repeat_rng(seed: u64, repeat_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(repeat_index);
    rng
}

/// Train/test sample indices, both ascending.
pub fn split_indices(ds: &MultiViewDataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Usage("split requires labels".into()))?;
    if spec.per_class == 0 {
        return Err(Error::Size("per-class training size must be >= 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if let Some((c, members)) = by_class.iter().find(|(_, v)| v.len() <= spec.per_class) {
        return Err(Error::Size(format!(
            "class {c} has {} samples, need more than M = {}",
            members.len(),
            spec.per_class
        )));
    }

    let mut rng = repeat_rng(spec.seed, spec.repeat_index);
    let mut train = Vec::with_capacity(by_class.len() * spec.per_class);
    let mut test = Vec::new();
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..spec.per_class]);
        test.extend_from_slice(&members[spec.per_class..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Draws `M` samples per class for training; the rest is the test set.
pub fn split(ds: &MultiViewDataset, spec: &SplitSpec) -> Result<(MultiViewDataset, MultiViewDataset)> {
    let (train, test) = split_indices(ds, spec)?;
    Ok((ds.select(&train)?, ds.select(&test)?))
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub views: usize,
    pub classes: usize,
    pub per_class: usize,
    pub dims: Vec<usize>,
    pub noise_sigma: f64,
    #[serde(default = "BlobSpec::default_center_scale")]
    pub center_scale: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub const DEFAULT_CENTER_SCALE: f64 = 3.0;

    fn default_center_scale() -> f64 {
        Self::DEFAULT_CENTER_SCALE
    }

    pub fn new(views: usize, classes: usize, per_class: usize, dims: Vec<usize>, noise_sigma: f64, seed: u64) -> Self {
        Self {
            views,
            classes,
            per_class,
            dims,
            noise_sigma,
            center_scale: Self::DEFAULT_CENTER_SCALE,
            seed,
        }
    }
}

/// Class-major Gaussian blobs: each (class, view) pair gets its own center
/// with i.i.d. `N(0, center_scale^2)` entries, and every sample is its
/// class center plus independent `N(0, noise_sigma^2)` noise in every view.
pub fn synth_blobs(spec: &BlobSpec) -> Result<MultiViewDataset> {
    if spec.views == 0 || spec.classes == 0 || spec.per_class == 0 {
        return Err(Error::Config("blob counts must be >= 1".into()));
    }
    if spec.dims.len() != spec.views {
        return Err(Error::Config(format!(
            "{} dims for {} views",
            spec.dims.len(),
            spec.views
        )));
    }
    if spec.dims.contains(&0) {
        return Err(Error::Config("blob dims must be >= 1".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise_sigma must be finite and >= 0, got {}",
            spec.noise_sigma
        )));
    }
    if !(spec.center_scale >= 0.0 && spec.center_scale.is_finite()) {
        return Err(Error::Config(format!(
            "center_scale must be finite and >= 0, got {}",
            spec.center_scale
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = spec.classes * spec.per_class;

    let centers: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            spec.dims
                .iter()
                .map(|&dm| (0..dm).map(|_| spec.center_scale * unit.sample(&mut rng)).collect())
                .collect()
        })
        .collect();

    let mut views: Vec<DMatrix<f64>> = spec.dims.iter().map(|&dm| DMatrix::zeros(dm, n)).collect();
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for j in 0..spec.per_class {
            let i = c * spec.per_class + j;
            labels.push(c);
            for (m, x) in views.iter_mut().enumerate() {
                for (r, &mu) in centers[c][m].iter().enumerate() {
                    x[(r, i)] = mu + spec.noise_sigma * unit.sample(&mut rng);
                }
            }
        }
    }
    MultiViewDataset::new(views, Some(labels))
}

fn read_error(path: &Path, row: usize, col: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: path.to_path_buf(),
        row,
        col,
        msg: msg.into(),
    }
}

/// Non-empty records of a headerless CSV file.
fn open_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| read_error(path, r + 1, 1, e.to_string()))?;
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

/// Reads a sample-major CSV (no header) into a feature-major matrix.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, fields) in open_csv(path)?.into_iter().enumerate() {
        let parsed = fields
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| read_error(path, r + 1, c + 1, format!("{s:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if parsed.len() != first.len() {
                return Err(read_error(
                    path,
                    r + 1,
                    parsed.len().min(first.len()) + 1,
                    format!("expected {} fields, found {}", first.len(), parsed.len()),
                ));
            }
        }
        rows.push(parsed);
    }
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(dim, n, |f, i| rows[i][f]))
}

/// Reads one integer class id per line.
pub fn read_labels_csv(path: &Path) -> Result<Vec<usize>> {
    open_csv(path)?
        .into_iter()
        .enumerate()
        .map(|(r, fields)| {
            if fields.len() != 1 {
                return Err(read_error(
                    path,
                    r + 1,
                    2,
                    format!("expected one label, found {} fields", fields.len()),
                ));
            }
            let s = fields[0].trim();
            s.parse::<usize>()
                .map_err(|e| read_error(path, r + 1, 1, format!("{s:?}: {e}")))
        })
        .collect()
}

/// Writes a feature-major matrix as sample-major CSV. Values use the
/// shortest representation that parses back to the identical `f64`.
pub fn write_matrix_csv(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for i in 0..x.ncols() {
        let line = x
            .column(i)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_labels_csv(path: &Path, labels: &[usize]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for l in labels {
        writeln!(w, "{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads aligned view files plus an optional label file.
pub fn load_views<P: AsRef<Path>>(view_paths: &[P], label_path: Option<&Path>) -> Result<MultiViewDataset> {
    let mut views = Vec::with_capacity(view_paths.len());
    for p in view_paths {
        let p = p.as_ref();
        let x = read_matrix_csv(p)?;
        if let Some(first) = views.first().map(|v: &DMatrix<f64>| v.ncols()) {
            if x.ncols() != first {
                return Err(Error::Alignment(format!(
                    "{} has {} rows, {} has {first}",
                    p.display(),
                    x.ncols(),
                    view_paths[0].as_ref().display()
                )));
            }
        }
        views.push(x);
    }
    let labels = match label_path {
        Some(p) => {
            let l = read_labels_csv(p)?;
            if let Some(x) = views.first() {
                if l.len() != x.ncols() {
                    return Err(Error::Alignment(format!(
                        "{} has {} rows, views have {}",
                        p.display(),
                        l.len(),
                        x.ncols()
                    )));
                }
            }
            Some(l)
        }
        None => None,
    };
    MultiViewDataset::new(views, labels)
}

/// Writes `view_1.csv .. view_V.csv` (and `labels.csv` when present) into
/// `dir`, returning the view paths in order.
pub fn save_views(ds: &MultiViewDataset, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (m, x) in ds.views().iter().enumerate() {
        let p = dir.join(format!("view_{}.csv", m + 1));
        write_matrix_csv(&p, x)?;
        paths.push(p);
    }
    if let Some(l) = ds.labels() {
        write_labels_csv(&dir.join("labels.csv"), l)?;
    }
    Ok(paths)
}
