//! Alternating Adam minimization of the total objective.
//!
//! One outer iteration is one sweep of Adam steps over every coefficient
//! column (view-major, ascending sample index) followed by one Adam step on
//! the stacked projection. Training stops once two consecutive total losses
//! differ by at most `tol`, or after `max_iters` outer iterations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_matrix_csv, write_matrix_csv, MultiViewDataset};
use crate::error::{Error, Result};
use crate::gradients::{column_grad_parts_with_embedding, ensure_finite, grad_p};
use crate::losses::{total_loss, CoefficientSet, Hyperparams, ProjectionStack};
use crate::par;

/// First/second moment accumulators of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m1: vec![0.0; len],
            m2: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], st: &mut AdamState, h: &Hyperparams) -> Result<()> {
    if param.len() != grad.len() || st.m1.len() != param.len() || st.m2.len() != param.len() {
        return Err(Error::Shape(format!(
            "adam step on {} parameters with {} gradients and {} moments",
            param.len(),
            grad.len(),
            st.m1.len()
        )));
    }
    ensure_finite(grad, || "adam gradient".to_string())?;
    st.t += 1;
    let t = st.t as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for (((x, &g), m1), m2) in param.iter_mut().zip(grad).zip(&mut st.m1).zip(&mut st.m2) {
        *m1 = h.beta1 * *m1 + (1.0 - h.beta1) * g;
        *m2 = h.beta2 * *m2 + (1.0 - h.beta2) * g * g;
        let m_hat = *m1 / c1;
        let v_hat = *m2 / c2;
        *x -= h.gamma * m_hat / (v_hat.sqrt() + h.eps_adam);
    }
    Ok(())
}

/// How a coefficient sweep orders its column updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Sequential; later columns see earlier updates. The reference mode.
    #[default]
    GaussSeidel,
    /// All column gradients from the pre-sweep snapshot, computed in
    /// parallel.
    Jacobi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub p: ProjectionStack,
    pub w: CoefficientSet,
    pub adam_p: AdamState,
    /// `adam_w[m][i]` belongs to column `i` of `W^m`.
    pub adam_w: Vec<Vec<AdamState>>,
    pub iter: usize,
    pub loss_history: Vec<f64>,
}

/// Per-view projections `P_m` and the settings that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub projections: Vec<DMatrix<f64>>,
    pub hyper: Hyperparams,
    pub meta: ModelMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub wall_clock_secs: f64,
}

impl Model {
    pub fn view_dims(&self) -> Vec<usize> {
        self.projections.iter().map(DMatrix::nrows).collect()
    }

    pub fn d(&self) -> usize {
        self.projections.first().map_or(0, DMatrix::ncols)
    }

    pub fn check_against(&self, ds: &MultiViewDataset) -> Result<()> {
        if self.view_dims() != ds.view_dims() {
            return Err(Error::Shape(format!(
                "model expects view dims {:?}, data has {:?}",
                self.view_dims(),
                ds.view_dims()
            )));
        }
        Ok(())
    }
}

/// Seeded Gaussian draws orthonormalized by QR, one block per view; every
/// coefficient column starts at `1/n`.
pub fn init_state(ds: &MultiViewDataset, h: &Hyperparams, seed: u64) -> Result<TrainState> {
    h.validate_for(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<DMatrix<f64>> = ds
        .view_dims()
        .into_iter()
        .map(|dm| {
            let g = DMatrix::from_fn(dm, h.d, |_, _| StandardNormal.sample(&mut rng));
            g.qr().q()
        })
        .collect();
    let p = ProjectionStack::from_blocks(&blocks)?;
    let n = ds.n_samples();
    let v_count = ds.n_views();
    let w = CoefficientSet::uniform(v_count, n);
    let loss = total_loss(&p, &w, ds, h)?;
    Ok(TrainState {
        adam_p: AdamState::new(p.stacked().len()),
        adam_w: vec![vec![AdamState::new(n); n]; v_count],
        p,
        w,
        iter: 0,
        loss_history: vec![loss],
    })
}

fn column_step(state: &mut TrainState, m: usize, i: usize, grad: &DVector<f64>, h: &Hyperparams) -> Result<()> {
    let mut col: Vec<f64> = state.w.view(m).column(i).iter().copied().collect();
    adam_step(&mut col, grad.as_slice(), &mut state.adam_w[m][i], h)
        .map_err(|e| with_context(e, &format!("column ({i}, view {m})")))?;
    state.w.view_mut(m).column_mut(i).copy_from_slice(&col);
    Ok(())
}

fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} at {ctx}")),
        other => other,
    }
}

/// One Adam step on every coefficient column.
pub fn sweep_w(state: &mut TrainState, ds: &MultiViewDataset, h: &Hyperparams, mode: SweepMode) -> Result<()> {
    let emb = state.p.embed(ds)?;
    let n = ds.n_samples();
    let v_count = ds.n_views();
    match mode {
        SweepMode::GaussSeidel => {
            for m in 0..v_count {
                for i in 0..n {
                    let w_col = state.w.view(m).column(i).into_owned();
                    let g = column_grad_parts_with_embedding(i, m, &w_col, &emb[m], &state.w, h).combined(h.lambda);
                    column_step(state, m, i, &g, h)?;
                }
            }
        }
        SweepMode::Jacobi => {
            let snapshot = &state.w;
            let grads = par::map_range(v_count * n, |idx| {
                let (m, i) = (idx / n, idx % n);
                let w_col = snapshot.view(m).column(i).into_owned();
                column_grad_parts_with_embedding(i, m, &w_col, &emb[m], snapshot, h).combined(h.lambda)
            });
            for (idx, g) in grads.iter().enumerate() {
                column_step(state, idx / n, idx % n, g, h)?;
            }
        }
    }
    Ok(())
}

/// One Adam step on the stacked projection.
pub fn step_p(state: &mut TrainState, ds: &MultiViewDataset, h: &Hyperparams) -> Result<()> {
    let g = grad_p(&state.p, &state.w, ds, h)?;
    adam_step(state.p.stacked_mut().as_mut_slice(), g.as_slice(), &mut state.adam_p, h)
}

/// Training options beyond the objective's hyperparameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FitOptions {
    pub mode: SweepMode,
}

/// Why [`fit`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIters,
}

/// A failed fit together with the last consistent training state.
#[derive(Debug)]
pub struct FitError {
    pub error: Error,
    pub state: Box<TrainState>,
}

impl std::fmt::Display for FitError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.state.iter)
    }
}

impl std::error::Error for FitError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<FitError> for Error {
    fn from(e: FitError) -> Self {
        e.error
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub model: Model,
    pub state: TrainState,
    pub stop: StopReason,
}

pub fn fit(ds: &MultiViewDataset, h: &Hyperparams, seed: u64) -> std::result::Result<FitOutcome, FitError> {
    fit_with(ds, h, seed, FitOptions::default())
}

pub fn fit_with(
    ds: &MultiViewDataset,
    h: &Hyperparams,
    seed: u64,
    opts: FitOptions,
) -> std::result::Result<FitOutcome, FitError> {
    let start = Instant::now();
    let mut state = match init_state(ds, h, seed) {
        Ok(s) => s,
        Err(error) => {
            return Err(FitError {
                error,
                state: Box::new(empty_state(ds)),
            })
        }
    };
    let mut stop = StopReason::MaxIters;
    while state.iter < h.max_iters {
        let before = state.clone();
        let step = sweep_w(&mut state, ds, h, opts.mode)
            .and_then(|_| step_p(&mut state, ds, h))
            .and_then(|_| total_loss(&state.p, &state.w, ds, h));
        let loss = match step {
            Ok(l) => l,
            Err(error) => {
                return Err(FitError {
                    error: with_context(error, &format!("outer iteration {}", before.iter + 1)),
                    state: Box::new(before),
                })
            }
        };
        state.loss_history.push(loss);
        state.iter += 1;
        let prev = state.loss_history[state.loss_history.len() - 2];
        if (prev - loss).abs() <= h.tol {
            stop = StopReason::Converged;
            break;
        }
    }
    let model = Model {
        projections: state.p.blocks(),
        hyper: h.clone(),
        meta: ModelMeta {
            seed,
            iterations: state.iter,
            final_loss: *state.loss_history.last().expect("history starts non-empty"),
            converged: stop == StopReason::Converged,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    };
    Ok(FitOutcome { model, state, stop })
}

fn empty_state(ds: &MultiViewDataset) -> TrainState {
    let blocks: Vec<DMatrix<f64>> = ds.view_dims().into_iter().map(|dm| DMatrix::zeros(dm, 0)).collect();
    TrainState {
        p: ProjectionStack::from_blocks(&blocks).expect("zero-width blocks"),
        w: CoefficientSet::uniform(ds.n_views(), ds.n_samples()),
        adam_p: AdamState::new(0),
        adam_w: Vec::new(),
        iter: 0,
        loss_history: Vec::new(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    views: Vec<ManifestView>,
    hyper: Hyperparams,
    meta: ModelMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestView {
    file: String,
    rows: usize,
    cols: usize,
}

const MANIFEST_FORMAT: &str = "mfedch-model";
pub const MANIFEST_FILE: &str = "model.json";

impl Model {
    /// Writes `model.json` and one `P_<m>.csv` per view (row `r` of the
    /// file is row `r` of `P_m`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut views = Vec::new();
        for (m, pm) in self.projections.iter().enumerate() {
            let file = format!("P_{}.csv", m + 1);
            write_matrix_csv(&dir.join(&file), &pm.transpose())?;
            views.push(ManifestView {
                file,
                rows: pm.nrows(),
                cols: pm.ncols(),
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            views,
            hyper: self.hyper.clone(),
            meta: self.meta.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a model saved by [`Model::save`]; `dir` may also name the
    /// manifest file itself.
    pub fn load(dir: &Path) -> Result<Self> {
        let (dir, path) = if dir.is_file() {
            (dir.parent().unwrap_or(Path::new(".")).to_path_buf(), dir.to_path_buf())
        } else {
            (dir.to_path_buf(), dir.join(MANIFEST_FILE))
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |msg: String| Error::Manifest {
            path: path.clone(),
            msg,
        };
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
            return Err(bad(format!(
                "unsupported format {:?} version {}",
                manifest.format, manifest.version
            )));
        }
        let mut projections = Vec::new();
        for v in &manifest.views {
            let pm = read_matrix_csv(&dir.join(&v.file))?.transpose();
            if pm.shape() != (v.rows, v.cols) {
                return Err(bad(format!(
                    "{} is {}x{}, manifest says {}x{}",
                    v.file,
                    pm.nrows(),
                    pm.ncols(),
                    v.rows,
                    v.cols
                )));
            }
            projections.push(pm);
        }
        if projections.is_empty() {
            return Err(bad("no projection blocks".into()));
        }
        ProjectionStack::from_blocks(&projections)?;
        Ok(Self {
            projections,
            hyper: manifest.hyper,
            meta: manifest.meta,
        })
    }
}
