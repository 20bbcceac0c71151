//! Embedding, nearest-neighbour classification and the repeated-split
//! experiment protocol.
//!
//! Each repeat draws `M` training samples per class, fits on the training
//! part only, and classifies the held-out samples by 1-NN in
//!
//! * every per-view embedding `Y_m = P_m^T X_m`,
//! * the fused embedding `Y = sum_m P_m^T X_m` (row label `II`),
//!
//! plus the mean of the per-view accuracies (row `Mean`). Rows report the
//! mean and the population standard deviation over repeats.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{split, MultiViewDataset, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::Hyperparams;
use crate::par;
use crate::trainer::{fit_with, FitOptions, Model};

/// `Y_m = P_m^T X_m` for every view.
pub fn project(model: &Model, ds: &MultiViewDataset) -> Result<Vec<DMatrix<f64>>> {
    model.check_against(ds)?;
    Ok(model
        .projections
        .iter()
        .zip(ds.views())
        .map(|(pm, x)| pm.tr_mul(x))
        .collect())
}

/// `sum_m P_m^T X_m`.
pub fn fuse(model: &Model, ds: &MultiViewDataset) -> Result<DMatrix<f64>> {
    let parts = project(model, ds)?;
    Ok(sum_embeddings(&parts))
}

fn sum_embeddings(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut it = parts.iter();
    let first = it.next().expect("at least one view").clone();
    it.fold(first, |acc, y| acc + y)
}

/// All views stacked into one `D x n` matrix, i.e. fusion with `P = I_D`.
pub fn concatenate_views(ds: &MultiViewDataset) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(ds.total_dim(), ds.n_samples());
    for (x, off) in ds.views().iter().zip(ds.offsets()) {
        out.view_mut((off, 0), x.shape()).copy_from(x);
    }
    out
}

/// Fraction of test columns whose `k` nearest training columns (squared
/// Euclidean distance) vote for the right label. Distance ties go to the
/// smaller training index; vote ties go to the class of the nearest voter.
pub fn knn_accuracy(
    train: &DMatrix<f64>,
    train_labels: &[usize],
    test: &DMatrix<f64>,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if train.ncols() == 0 {
        return Err(Error::Usage(
            "nearest-neighbour classification with an empty training set".into(),
        ));
    }
    if test.ncols() == 0 {
        return Err(Error::Usage(
            "nearest-neighbour classification with an empty test set".into(),
        ));
    }
    if k == 0 {
        return Err(Error::Usage("k must be >= 1".into()));
    }
    if train.nrows() != test.nrows() {
        return Err(Error::Shape(format!(
            "train embeddings have dimension {}, test {}",
            train.nrows(),
            test.nrows()
        )));
    }
    if train_labels.len() != train.ncols() || test_labels.len() != test.ncols() {
        return Err(Error::Shape("label count does not match embedding count".into()));
    }
    let k = k.min(train.ncols());
    let hits = par::map_range(test.ncols(), |t| {
        let q = test.column(t);
        let mut dist: Vec<(f64, usize)> = train
            .column_iter()
            .enumerate()
            .map(|(j, c)| ((c - q).norm_squared(), j))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let predicted = if k == 1 {
            train_labels[dist[0].1]
        } else {
            vote(dist[..k].iter().map(|&(_, j)| train_labels[j]))
        };
        predicted == test_labels[t]
    });
    Ok(hits.iter().filter(|&&h| h).count() as f64 / test.ncols() as f64)
}

/// Majority label of nearest-first neighbours; ties resolved by rank.
fn vote(neighbours: impl Iterator<Item = usize>) -> usize {
    let ranked: Vec<usize> = neighbours.collect();
    let count = |l: usize| ranked.iter().filter(|&&x| x == l).count();
    let best = ranked.iter().map(|&l| count(l)).max().unwrap_or(0);
    *ranked.iter().find(|&&l| count(l) == best).expect("non-empty")
}

/// One aggregated row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub per_class: usize,
    pub mean: f64,
    /// Population standard deviation over repeats.
    pub std: f64,
    pub repeats: usize,
    /// Embedding dimension the row was obtained with, when a sweep chose it.
    pub d: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub method: String,
    pub rows: Vec<ResultRow>,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    /// `per_repeat[r][row]`, in the row order of `rows`.
    pub per_repeat: Vec<Vec<f64>>,
}

pub const CSV_HEADER: &str = "row_label,M,mean,std,repeats";

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:?},{:?},{}",
                r.label, r.per_class, r.mean, r.std, r.repeats
            )
            .expect("string write");
        }
        out
    }

    /// Percentages, one block per training size, shaped like
    /// `Train-M / view rows / Mean / II`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(4).max(4);
        let mut sizes: Vec<usize> = self.rows.iter().map(|r| r.per_class).collect();
        sizes.dedup();
        writeln!(
            out,
            "{:width$}  {:>16}   (mean ± population std over {} repeats, %)",
            "View", self.method, self.repeats
        )
        .expect("string write");
        for m in sizes {
            writeln!(out, "Train-{m}").expect("string write");
            for r in self.rows.iter().filter(|r| r.per_class == m) {
                let cell = format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std);
                let d = r.d.map(|d| format!("  (d = {d})")).unwrap_or_default();
                writeln!(out, "{:width$}  {cell:>16}{d}", r.label).expect("string write");
            }
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }

    /// Appends the rows of several tables (e.g. one per training size).
    pub fn concat(tables: Vec<ResultsTable>) -> Option<ResultsTable> {
        let mut it = tables.into_iter();
        let mut first = it.next()?;
        for t in it {
            first.rows.extend(t.rows);
            first.per_repeat.extend(t.per_repeat);
            first.seeds.extend(t.seeds);
        }
        first.seeds.dedup();
        Some(first)
    }
}

/// `(mean, population std)`.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOptions {
    /// Training samples per class.
    pub per_class: usize,
    pub repeats: usize,
    pub base_seed: u64,
    /// Row labels for the views; defaults to `view1..viewV`.
    #[serde(default)]
    pub view_names: Option<Vec<String>>,
    /// Run repeats concurrently. Results do not depend on it.
    #[serde(default)]
    pub parallel_repeats: bool,
    #[serde(default)]
    pub fit: FitOptionsSer,
}

/// Serializable mirror of [`FitOptions`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOptionsSer {
    #[serde(default)]
    pub mode: crate::trainer::SweepMode,
}

impl From<FitOptionsSer> for FitOptions {
    fn from(f: FitOptionsSer) -> Self {
        FitOptions { mode: f.mode }
    }
}

impl ExperimentOptions {
    pub fn new(per_class: usize, repeats: usize, base_seed: u64) -> Self {
        Self {
            per_class,
            repeats,
            base_seed,
            view_names: None,
            parallel_repeats: false,
            fit: FitOptionsSer::default(),
        }
    }

    fn row_labels(&self, v_count: usize) -> Result<Vec<String>> {
        let mut labels = match &self.view_names {
            Some(names) if names.len() != v_count => {
                return Err(Error::Config(format!("{} view names for {v_count} views", names.len())))
            }
            Some(names) => names.clone(),
            None => (1..=v_count).map(|m| format!("view{m}")).collect(),
        };
        labels.push("Mean".into());
        labels.push("II".into());
        Ok(labels)
    }
}

/// Seed handed to [`fit`](crate::trainer::fit) in repeat `r`.
pub fn fit_seed(base_seed: u64, repeat: u64) -> u64 {
    base_seed ^ (repeat + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-view, Mean and II accuracies for one split, given the embedding
/// function.
fn repeat_accuracies<F>(train: &MultiViewDataset, test: &MultiViewDataset, embed: F) -> Result<Vec<f64>>
where
    F: Fn(&MultiViewDataset) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)>,
{
    let tr_labels = train.labels().expect("split keeps labels");
    let te_labels = test.labels().expect("split keeps labels");
    let (tr_views, tr_fused) = embed(train)?;
    let (te_views, te_fused) = embed(test)?;
    let mut acc = Vec::with_capacity(tr_views.len() + 2);
    for (a, b) in tr_views.iter().zip(&te_views) {
        acc.push(knn_accuracy(a, tr_labels, b, te_labels, 1)?);
    }
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    acc.push(mean);
    acc.push(knn_accuracy(&tr_fused, tr_labels, &te_fused, te_labels, 1)?);
    Ok(acc)
}

fn assemble(
    method: &str,
    labels: Vec<String>,
    per_class: usize,
    seeds: Vec<u64>,
    per_repeat: Vec<Vec<f64>>,
) -> ResultsTable {
    let repeats = per_repeat.len();
    let rows = labels
        .into_iter()
        .enumerate()
        .map(|(j, label)| {
            let xs: Vec<f64> = per_repeat.iter().map(|r| r[j]).collect();
            let (mean, std) = mean_std(&xs);
            ResultRow {
                label,
                per_class,
                mean,
                std,
                repeats,
                d: None,
            }
        })
        .collect();
    ResultsTable {
        method: method.into(),
        rows,
        repeats,
        seeds,
        per_repeat,
    }
}

fn run_repeats<F>(ds: &MultiViewDataset, opts: &ExperimentOptions, one: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(u64, &MultiViewDataset, &MultiViewDataset) -> Result<Vec<f64>> + Sync + Send,
{
    if opts.repeats == 0 {
        return Err(Error::Usage("repeats must be >= 1".into()));
    }
    let job = |r: usize| {
        let spec = SplitSpec {
            per_class: opts.per_class,
            seed: opts.base_seed,
            repeat_index: r as u64,
        };
        let (train, test) = split(ds, &spec)?;
        one(r as u64, &train, &test)
    };
    if opts.parallel_repeats {
        par::try_map_range(opts.repeats, job)
    } else {
        (0..opts.repeats).map(job).collect()
    }
}

/// The full protocol with the dual-contrastive model fitted per repeat.
pub fn run_experiment(ds: &MultiViewDataset, h: &Hyperparams, opts: &ExperimentOptions) -> Result<ResultsTable> {
    let labels = opts.row_labels(ds.n_views())?;
    h.validate_for(ds)?;
    let per_repeat = run_repeats(ds, opts, |r, train, test| {
        let out = fit_with(train, h, fit_seed(opts.base_seed, r), opts.fit.into())?;
        let model = out.model;
        repeat_accuracies(train, test, |part| {
            let views = project(&model, part)?;
            let fused = sum_embeddings(&views);
            Ok((views, fused))
        })
    })?;
    let seeds = (0..opts.repeats as u64).map(|r| fit_seed(opts.base_seed, r)).collect();
    Ok(assemble("MFEDCH", labels, opts.per_class, seeds, per_repeat))
}

/// Same splits, 1-NN on the raw features; `II` is the concatenation of all
/// views.
pub fn run_raw_baseline(ds: &MultiViewDataset, opts: &ExperimentOptions) -> Result<ResultsTable> {
    let labels = opts.row_labels(ds.n_views())?;
    let per_repeat = run_repeats(ds, opts, |_, train, test| {
        repeat_accuracies(train, test, |part| Ok((part.views().to_vec(), concatenate_views(part))))
    })?;
    Ok(assemble(
        "Raw",
        labels,
        opts.per_class,
        vec![opts.base_seed],
        per_repeat,
    ))
}

/// Runs the protocol for every `d` and keeps, per row, the dimension with
/// the best mean accuracy (first on ties).
pub fn run_d_sweep(
    ds: &MultiViewDataset,
    h: &Hyperparams,
    dims: &[usize],
    opts: &ExperimentOptions,
) -> Result<ResultsTable> {
    let tables = dims
        .iter()
        .map(|&d| {
            let hd = Hyperparams { d, ..h.clone() };
            run_experiment(ds, &hd, opts).map(|t| (d, t))
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, first) = tables.first().ok_or_else(|| Error::Config("empty d sweep".into()))?;
    let mut best = first.clone();
    for row in &mut best.rows {
        row.d = Some(dims[0]);
    }
    for (d, t) in &tables[1..] {
        for (b, r) in best.rows.iter_mut().zip(&t.rows) {
            if r.mean > b.mean {
                *b = ResultRow {
                    d: Some(*d),
                    ..r.clone()
                };
            }
        }
    }
    best.per_repeat.clear();
    Ok(best)
}
