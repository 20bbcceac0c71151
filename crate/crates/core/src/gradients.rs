//! Analytic gradients of the objective and a central-difference oracle.
//!
//! The coefficient gradient is taken of the per-column subproblem: with `P`
//! and every other view's coefficients fixed, column `w_i^m` enters
//!
//! ```text
//! lambda * [ (1/n) sum_{v != m} ( lse_k sim(w, w_k^v) - sim(w, w_i^v) )
//!            + alpha ||y_i^m - Y^m w||^2 + beta ||w||^2 ]
//! ```
//!
//! which is exactly the part of the total loss where `w_i^m` is the anchor
//! or the reconstruction target. The projection gradient is the full
//! gradient of the total loss with `W` fixed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{repeat_rng, MultiViewDataset};
use crate::error::{Error, Result};
use crate::losses::{column_norms, log_sum_exp, total_loss, CoefficientSet, Hyperparams, ProjectionStack, Similarity};
use crate::par;

/// Contrastive and quadratic parts of `d/dw_i^m`, before the `lambda` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnGradParts {
    pub contrastive: DVector<f64>,
    pub quadratic: DVector<f64>,
}

impl ColumnGradParts {
    pub fn combined(&self, lambda: f64) -> DVector<f64> {
        (&self.contrastive + &self.quadratic) * lambda
    }
}

/// Sample-level and reconstruction parts of `d/dP`, before weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGradParts {
    pub contrastive: DMatrix<f64>,
    pub reconstruction: DMatrix<f64>,
}

impl ProjectionGradParts {
    pub fn combined(&self, lambda: f64) -> DMatrix<f64> {
        &self.contrastive + &self.reconstruction * lambda
    }
}

fn check_column_index(i: usize, m: usize, w: &CoefficientSet) -> Result<()> {
    if m >= w.n_views() || i >= w.n_samples() {
        return Err(Error::Index(format!(
            "column ({i}, view {m}) of {} views x {} samples",
            w.n_views(),
            w.n_samples()
        )));
    }
    Ok(())
}

/// Column gradient with the view embedding `Y^m` supplied by the caller.
pub(crate) fn column_grad_parts_with_embedding(
    i: usize,
    m: usize,
    w_col: &DVector<f64>,
    y: &DMatrix<f64>,
    w: &CoefficientSet,
    h: &Hyperparams,
) -> ColumnGradParts {
    let n = w.n_samples();
    let anchor = DMatrix::from_column_slice(n, 1, w_col.as_slice());
    let anchor_norm = [w_col.norm()];
    let mut contrastive = DVector::zeros(n);
    for v in (0..w.n_views()).filter(|&v| v != m) {
        let wv = w.view(v);
        let wv_norms = column_norms(wv);
        let sim = Similarity {
            a: &anchor,
            b: wv,
            a_norms: &anchor_norm,
            b_norms: &wv_norms,
            tau: h.tau2,
            norm_eps: h.norm_eps,
        };
        let logits: Vec<f64> = (0..n).map(|k| sim.sim(0, k)).collect();
        let lse = log_sum_exp(&logits);
        for (k, s) in logits.iter().enumerate() {
            let coef = ((s - lse).exp() - if k == i { 1.0 } else { 0.0 }) / n as f64;
            sim.grad_first(0, k, contrastive.as_mut_slice(), coef);
        }
    }
    let resid = y * w_col - y.column(i);
    let quadratic = y.tr_mul(&resid) * (2.0 * h.alpha) + w_col * (2.0 * h.beta);
    ColumnGradParts { contrastive, quadratic }
}

pub fn grad_w_parts(
    i: usize,
    m: usize,
    p: &ProjectionStack,
    w: &CoefficientSet,
    ds: &MultiViewDataset,
    h: &Hyperparams,
) -> Result<ColumnGradParts> {
    check_column_index(i, m, w)?;
    let y = p.embed(ds)?.swap_remove(m);
    let w_col = w.view(m).column(i).into_owned();
    Ok(column_grad_parts_with_embedding(i, m, &w_col, &y, w, h))
}

/// Gradient of the column subproblem with respect to `w_i^m` (zero-based).
pub fn grad_w(
    i: usize,
    m: usize,
    p: &ProjectionStack,
    w: &CoefficientSet,
    ds: &MultiViewDataset,
    h: &Hyperparams,
) -> Result<DVector<f64>> {
    let g = grad_w_parts(i, m, p, w, ds, h)?.combined(h.lambda);
    ensure_finite(g.as_slice(), || format!("gradient of column ({i}, view {m})"))?;
    Ok(g)
}

/// The column subproblem evaluated at `w_col` in place of `w_i^m`.
pub fn column_objective(
    i: usize,
    m: usize,
    w_col: &[f64],
    p: &ProjectionStack,
    w: &CoefficientSet,
    ds: &MultiViewDataset,
    h: &Hyperparams,
) -> Result<f64> {
    check_column_index(i, m, w)?;
    let n = w.n_samples();
    if w_col.len() != n {
        return Err(Error::Shape(format!("column of length {} for n = {n}", w_col.len())));
    }
    let y = p.embed(ds)?.swap_remove(m);
    Ok(column_objective_with_embedding(i, m, w_col, &y, w, h))
}

fn column_objective_with_embedding(
    i: usize,
    m: usize,
    w_col: &[f64],
    y: &DMatrix<f64>,
    w: &CoefficientSet,
    h: &Hyperparams,
) -> f64 {
    let n = w.n_samples();
    let anchor = DMatrix::from_column_slice(n, 1, w_col);
    let anchor_norm = [anchor.norm()];
    let mut contrastive = 0.0;
    for v in (0..w.n_views()).filter(|&v| v != m) {
        let wv_norms = column_norms(w.view(v));
        let sim = Similarity {
            a: &anchor,
            b: w.view(v),
            a_norms: &anchor_norm,
            b_norms: &wv_norms,
            tau: h.tau2,
            norm_eps: h.norm_eps,
        };
        let logits: Vec<f64> = (0..n).map(|k| sim.sim(0, k)).collect();
        contrastive += (log_sum_exp(&logits) - logits[i]) / n as f64;
    }
    let wv = DVector::from_column_slice(w_col);
    let resid = y * &wv - y.column(i);
    h.lambda * (contrastive + h.alpha * resid.norm_squared() + h.beta * wv.norm_squared())
}

pub fn grad_p_parts(
    p: &ProjectionStack,
    w: &CoefficientSet,
    ds: &MultiViewDataset,
    h: &Hyperparams,
) -> Result<ProjectionGradParts> {
    let emb = p.embed(ds)?;
    if w.n_views() != ds.n_views() || w.n_samples() != ds.n_samples() {
        return Err(Error::Shape(format!(
            "{} coefficient matrices of size {}x{} for {} views of {} samples",
            w.n_views(),
            w.n_samples(),
            w.n_samples(),
            ds.n_views(),
            ds.n_samples()
        )));
    }
    let v_count = ds.n_views();
    let n = ds.n_samples();
    let d = p.d();
    let norms: Vec<Vec<f64>> = emb.iter().map(column_norms).collect();
    let sim = |m: usize, v: usize| Similarity {
        a: &emb[m],
        b: &emb[v],
        a_norms: &norms[m],
        b_norms: &norms[v],
        tau: h.tau1,
        norm_eps: h.norm_eps,
    };

    // coef[m * n + i][v][k] = d(anchor term (m, i)) / d sim(y_i^m, y_k^v), already / n
    let coef: Vec<Vec<Vec<f64>>> = par::map_range(v_count * n, |idx| {
        let (m, i) = (idx / n, idx % n);
        let logits: Vec<Vec<f64>> = (0..v_count)
            .map(|v| {
                if v == m {
                    Vec::new()
                } else {
                    let s = sim(m, v);
                    (0..n).map(|k| s.sim(i, k)).collect()
                }
            })
            .collect();
        let all: Vec<f64> = logits.iter().flatten().copied().collect();
        let pos: Vec<f64> = logits.iter().filter(|l| !l.is_empty()).map(|l| l[i]).collect();
        let lse_all = log_sum_exp(&all);
        let lse_pos = log_sum_exp(&pos);
        logits
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(k, &s)| {
                        let mut c = (s - lse_all).exp();
                        if k == i {
                            c -= (s - lse_pos).exp();
                        }
                        c / n as f64
                    })
                    .collect()
            })
            .collect()
    });

    // gradient w.r.t. embedding column (m, j): as anchor, and as the
    // comparison point of anchor (v, k)
    let emb_grad: Vec<Vec<f64>> = par::map_range(v_count * n, |idx| {
        let (m, j) = (idx / n, idx % n);
        let mut g = vec![0.0; d];
        for v in (0..v_count).filter(|&v| v != m) {
            let s = sim(m, v);
            for k in 0..n {
                let c = coef[m * n + j][v][k] + coef[v * n + k][m][j];
                if c != 0.0 {
                    s.grad_first(j, k, &mut g, c);
                }
            }
        }
        g
    });

    let mut contrastive = DMatrix::zeros(p.stacked().nrows(), d);
    let mut reconstruction = DMatrix::zeros(p.stacked().nrows(), d);
    for m in 0..v_count {
        let g_emb = DMatrix::from_fn(d, n, |r, j| emb_grad[m * n + j][r]);
        let x = ds.view(m);
        let off = p.offsets()[m];
        contrastive
            .view_mut((off, 0), (x.nrows(), d))
            .copy_from(&(x * g_emb.transpose()));

        let i_minus_w = DMatrix::identity(n, n) - w.view(m);
        let g_rec = &emb[m] * &i_minus_w * i_minus_w.transpose() * (2.0 * h.alpha);
        reconstruction
            .view_mut((off, 0), (x.nrows(), d))
            .copy_from(&(x * g_rec.transpose()));
    }
    Ok(ProjectionGradParts {
        contrastive,
        reconstruction,
    })
}

/// Gradient of the total loss with respect to the stacked projection.
pub fn grad_p(p: &ProjectionStack, w: &CoefficientSet, ds: &MultiViewDataset, h: &Hyperparams) -> Result<DMatrix<f64>> {
    let g = grad_p_parts(p, w, ds, h)?.combined(h.lambda);
    ensure_finite(g.as_slice(), || "projection gradient".to_string())?;
    Ok(g)
}

pub(crate) fn ensure_finite(xs: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    match xs.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(Error::Numeric(format!("{} (coordinate {j})", what()))),
        None => Ok(()),
    }
}

/// Central differences `(f(x + h e_j) - f(x - h e_j)) / 2h` per coordinate.
pub fn fd_gradient<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    par::try_map_range(x.len(), |j| {
        let mut probe = x.to_vec();
        probe[j] = x[j] + step;
        let up = f(&probe);
        probe[j] = x[j] - step;
        let down = f(&probe);
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numeric(format!(
                "finite-difference evaluation at coordinate {j}"
            )));
        }
        Ok((up - down) / (2.0 * step))
    })
}

/// Which parameter block a gradient-check entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradBlock {
    Column { view: usize, sample: usize },
    Projection,
}

impl std::fmt::Display for GradBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradBlock::Column { view, sample } => write!(f, "w[view {view}, sample {sample}]"),
            GradBlock::Projection => write!(f, "P"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `||a - g||_inf / max(||a||_inf, ||g||_inf, 1e-12)` over blocks.
    pub max_rel_err: f64,
    /// Block and flat coordinate with the largest absolute discrepancy inside
    /// the worst block.
    pub worst_coordinate: (GradBlock, usize),
    pub step: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub blocks_checked: usize,
}

fn inf_norm(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, x| a.max(x.abs()))
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    diff / inf_norm(analytic).max(inf_norm(numeric)).max(1e-12)
}

/// Compares [`grad_w`] for every column and [`grad_p`] against
/// [`fd_gradient`].
pub fn check_gradients(
    p: &ProjectionStack,
    w: &CoefficientSet,
    ds: &MultiViewDataset,
    h: &Hyperparams,
    step: f64,
) -> Result<GradCheckReport> {
    check_gradients_with(
        p,
        w,
        ds,
        h,
        step,
        |i, m| grad_w(i, m, p, w, ds, h),
        || grad_p(p, w, ds, h),
    )
}

/// [`check_gradients`] with the analytic gradients supplied by the caller.
pub fn check_gradients_with<GW, GP>(
    p: &ProjectionStack,
    w: &CoefficientSet,
    ds: &MultiViewDataset,
    h: &Hyperparams,
    step: f64,
    analytic_w: GW,
    analytic_p: GP,
) -> Result<GradCheckReport>
where
    GW: Fn(usize, usize) -> Result<DVector<f64>> + Sync + Send,
    GP: FnOnce() -> Result<DMatrix<f64>>,
{
    let v_count = w.n_views();
    let n = w.n_samples();
    let emb = p.embed(ds)?;

    let mut results: Vec<(GradBlock, Vec<f64>, Vec<f64>)> =
        par::try_map_range(v_count * n, |idx| -> Result<(GradBlock, Vec<f64>, Vec<f64>)> {
            let (m, i) = (idx / n, idx % n);
            let analytic = analytic_w(i, m)?;
            let start: Vec<f64> = w.view(m).column(i).iter().copied().collect();
            let numeric = fd_gradient(
                |x| column_objective_with_embedding(i, m, x, &emb[m], w, h),
                &start,
                step,
            )?;
            Ok((
                GradBlock::Column { view: m, sample: i },
                analytic.as_slice().to_vec(),
                numeric,
            ))
        })?;

    let analytic = analytic_p()?;
    let dims = p.dims().to_vec();
    let d = p.d();
    let numeric = fd_gradient(
        |x| {
            let trial = ProjectionStack::from_stacked(DMatrix::from_column_slice(x.len() / d, d, x), &dims)
                .expect("same layout");
            total_loss(&trial, w, ds, h).unwrap_or(f64::NAN)
        },
        p.stacked().as_slice(),
        step,
    )?;
    results.push((GradBlock::Projection, analytic.as_slice().to_vec(), numeric));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: (GradBlock::Projection, 0),
        step,
        analytic_norm: 0.0,
        numeric_norm: 0.0,
        blocks_checked: results.len(),
    };
    let mut first = true;
    for (block, a, g) in &results {
        if a.len() != g.len() {
            return Err(Error::Shape(format!(
                "analytic gradient of {block} has length {}, expected {}",
                a.len(),
                g.len()
            )));
        }
        let rel = relative_error(a, g);
        if first || rel > report.max_rel_err {
            first = false;
            let worst = a
                .iter()
                .zip(g)
                .map(|(x, y)| (x - y).abs())
                .enumerate()
                .fold((0, -1.0), |best, (j, e)| if e > best.1 { (j, e) } else { best })
                .0;
            report.max_rel_err = rel;
            report.worst_coordinate = (*block, worst);
            report.analytic_norm = inf_norm(a);
            report.numeric_norm = inf_norm(g);
        }
    }
    Ok(report)
}

/// Size limits and seeding for a batch of random gradient checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckPlan {
    pub instances: usize,
    pub seed: u64,
    pub max_n: usize,
    pub max_views: usize,
    pub max_dim: usize,
    pub max_d: usize,
    pub step: f64,
}

impl Default for GradCheckPlan {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            max_n: 6,
            max_views: 3,
            max_dim: 5,
            max_d: 3,
            step: 1e-5,
        }
    }
}

/// A random point at which to compare gradients.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub ds: MultiViewDataset,
    pub p: ProjectionStack,
    pub w: CoefficientSet,
    pub h: Hyperparams,
}

impl GradCheckPlan {
    /// Instance `k` of the plan. Shapes, data, parameters and the loss
    /// weights are all drawn from one stream keyed by `(seed, k)`.
    pub fn instance(&self, k: usize) -> Result<GradCheckInstance> {
        if self.max_n < 2 || self.max_views < 2 || self.max_dim < 1 || self.max_d < 1 {
            return Err(Error::Config(
                "gradcheck limits need max_n >= 2, max_views >= 2, max_dim >= 1, max_d >= 1".into(),
            ));
        }
        let mut rng = repeat_rng(self.seed, k as u64);
        let v_count = rng.random_range(2..=self.max_views);
        let n = rng.random_range(2..=self.max_n);
        let dims: Vec<usize> = (0..v_count).map(|_| rng.random_range(1..=self.max_dim)).collect();
        let d_cap = dims.iter().copied().min().unwrap_or(1).min(self.max_d);
        let d = rng.random_range(1..=d_cap);
        let mut gauss = |rows: usize, cols: usize, scale: f64| {
            DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let views = dims.iter().map(|&dm| gauss(dm, n, 1.0)).collect();
        let blocks: Vec<DMatrix<f64>> = dims.iter().map(|&dm| gauss(dm, d, 0.7)).collect();
        let coeffs = dims
            .iter()
            .map(|_| gauss(n, n, 0.5).add_scalar(1.0 / n as f64))
            .collect();
        let ds = MultiViewDataset::new(views, None)?;
        let p = ProjectionStack::from_blocks(&blocks)?;
        let w = CoefficientSet::new(coeffs)?;
        let h = Hyperparams {
            d,
            lambda: rng.random_range(0.5..2.0),
            alpha: rng.random_range(0.2..1.5),
            beta: rng.random_range(0.2..1.5),
            tau1: rng.random_range(0.5..2.0),
            tau2: rng.random_range(0.5..2.0),
            ..Hyperparams::default()
        };
        Ok(GradCheckInstance { ds, p, w, h })
    }

    /// Runs [`check_gradients`] on every instance of the plan.
    pub fn run(&self) -> Result<Vec<GradCheckReport>> {
        (0..self.instances)
            .map(|k| {
                let inst = self.instance(k)?;
                check_gradients(&inst.p, &inst.w, &inst.ds, &inst.h, self.step)
            })
            .collect()
    }
}
