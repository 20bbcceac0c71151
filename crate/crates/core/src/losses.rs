//! The dual contrastive objective.
//!
//! * sample level: CMC-paired InfoNCE over the embeddings `y_i^m = P_m^T x_i^m`.
//!   For an anchor `y_i^m` the positives are the same sample in every other
//!   view and the negatives are every other sample in every other view.
//! * structural level: InfoNCE over the self-reconstruction coefficient
//!   columns `w_i^m`, contrasting column `i` of `W^m` against all columns of
//!   `W^v` for every ordered view pair `v != m`, plus the reconstruction
//!   penalty `alpha ||Y^m - Y^m W^m||_F^2 + beta ||W^m||_F^2`.
//!
//! The total is `sample + lambda * (structural + reconstruction)`.
//! Expectations over anchors are realized as arithmetic means over samples.
//! All exponentials go through a max-shifted log-sum-exp.

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::dataset::{block_offsets, MultiViewDataset};
use crate::error::{Error, Result};
use crate::par;

/// Every scalar the objective and the optimizer read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Embedding dimension.
    pub d: usize,
    /// Weight of the structural term.
    pub lambda: f64,
    /// Reconstruction weight.
    pub alpha: f64,
    /// Ridge weight on `W^m`; keeps `W^m` away from the identity.
    pub beta: f64,
    /// Temperature of the sample-level similarities.
    pub tau1: f64,
    /// Temperature of the structural-level similarities.
    pub tau2: f64,
    /// Adam learning rate.
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Added to `||u|| ||v||` in every cosine denominator.
    pub norm_eps: f64,
    /// Stop when consecutive total losses differ by at most this much.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            d: 2,
            lambda: 1.0,
            alpha: 1.0,
            beta: 1.0,
            tau1: 1.0,
            tau2: 1.0,
            gamma: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            norm_eps: 1e-12,
            tol: 1e-3,
            max_iters: 500,
        }
    }
}

impl Hyperparams {
    /// Checks the positivity and range constraints. `max_iters = 0` is
    /// accepted and means "return the initialization".
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("gamma", self.gamma),
            ("eps_adam", self.eps_adam),
            ("norm_eps", self.norm_eps),
            ("tol", self.tol),
        ];
        for (name, v) in positive {
            // tol may be +inf (single outer iteration)
            if !(v > 0.0) || (v.is_infinite() && name != "tol") {
                return Err(Error::Config(format!("{name} must be > 0 and finite, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        Ok(())
    }

    /// Also checks `d <= min_m D_m` against a dataset.
    pub fn validate_for(&self, ds: &MultiViewDataset) -> Result<()> {
        self.validate()?;
        let min_dim = ds.view_dims().into_iter().min().unwrap_or(0);
        if self.d > min_dim {
            return Err(Error::Config(format!(
                "d = {} exceeds the smallest view dimension {min_dim}",
                self.d
            )));
        }
        Ok(())
    }
}

/// `P = [P_1; ...; P_V]`, `D x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    p: DMatrix<f64>,
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl ProjectionStack {
    pub fn from_blocks(blocks: &[DMatrix<f64>]) -> Result<Self> {
        let d = blocks
            .first()
            .map(DMatrix::ncols)
            .ok_or_else(|| Error::Shape("no projection blocks".into()))?;
        if let Some((m, b)) = blocks.iter().enumerate().find(|(_, b)| b.ncols() != d) {
            return Err(Error::Shape(format!(
                "block {m} has {} columns, block 0 has {d}",
                b.ncols()
            )));
        }
        let dims: Vec<usize> = blocks.iter().map(DMatrix::nrows).collect();
        let total = dims.iter().sum();
        let mut p = DMatrix::zeros(total, d);
        let offsets = block_offsets(&dims);
        for (b, &off) in blocks.iter().zip(&offsets) {
            p.view_mut((off, 0), b.shape()).copy_from(b);
        }
        Ok(Self { p, dims, offsets })
    }

    pub fn from_stacked(p: DMatrix<f64>, dims: &[usize]) -> Result<Self> {
        let total: usize = dims.iter().sum();
        if p.nrows() != total {
            return Err(Error::Shape(format!(
                "stacked projection has {} rows, view dims sum to {total}",
                p.nrows()
            )));
        }
        Ok(Self {
            p,
            dims: dims.to_vec(),
            offsets: block_offsets(dims),
        })
    }

    pub fn stacked(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn stacked_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.p
    }

    pub fn block(&self, m: usize) -> DMatrixView<'_, f64> {
        self.p.view((self.offsets[m], 0), (self.dims[m], self.p.ncols()))
    }

    pub fn blocks(&self) -> Vec<DMatrix<f64>> {
        (0..self.dims.len()).map(|m| self.block(m).into_owned()).collect()
    }

    pub fn d(&self) -> usize {
        self.p.ncols()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    fn check_against(&self, ds: &MultiViewDataset) -> Result<()> {
        if self.dims != ds.view_dims() {
            return Err(Error::Shape(format!(
                "projection view dims {:?} do not match data view dims {:?}",
                self.dims,
                ds.view_dims()
            )));
        }
        Ok(())
    }

    /// `Y^m = P_m^T X^m` for every view.
    pub fn embed(&self, ds: &MultiViewDataset) -> Result<Vec<DMatrix<f64>>> {
        self.check_against(ds)?;
        Ok(ds
            .views()
            .iter()
            .enumerate()
            .map(|(m, x)| self.block(m).tr_mul(x))
            .collect())
    }
}

/// One `n x n` self-reconstruction matrix per view.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    w: Vec<DMatrix<f64>>,
}

impl CoefficientSet {
    pub fn new(w: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = w.first().map_or(0, DMatrix::ncols);
        for (m, wm) in w.iter().enumerate() {
            if wm.shape() != (n, n) {
                return Err(Error::Shape(format!(
                    "W^{m} is {}x{}, expected {n}x{n}",
                    wm.nrows(),
                    wm.ncols()
                )));
            }
        }
        Ok(Self { w })
    }

    /// Every column equal to `1/n`.
    pub fn uniform(n_views: usize, n: usize) -> Self {
        Self {
            w: vec![DMatrix::from_element(n, n, 1.0 / n as f64); n_views],
        }
    }

    pub fn view(&self, m: usize) -> &DMatrix<f64> {
        &self.w[m]
    }

    pub fn view_mut(&mut self, m: usize) -> &mut DMatrix<f64> {
        &mut self.w[m]
    }

    pub fn views(&self) -> &[DMatrix<f64>] {
        &self.w
    }

    pub fn n_views(&self) -> usize {
        self.w.len()
    }

    pub fn n_samples(&self) -> usize {
        self.w.first().map_or(0, DMatrix::ncols)
    }

    fn check_against(&self, ds: &MultiViewDataset) -> Result<()> {
        if self.n_views() != ds.n_views() || self.n_samples() != ds.n_samples() {
            return Err(Error::Shape(format!(
                "{} coefficient matrices of size {n}x{n} for {} views of {} samples",
                self.n_views(),
                ds.n_views(),
                ds.n_samples(),
                n = self.n_samples()
            )));
        }
        Ok(())
    }
}

/// `u^T v / ((||u|| ||v|| + norm_eps) tau)`.
pub fn cosine_sim(u: &[f64], v: &[f64], tau: f64, norm_eps: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "similarity of vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(dot / ((nu * nv + norm_eps) * tau))
}

/// Temperature-scaled cosine similarities between the columns of two
/// matrices with precomputed column norms.
pub(crate) struct Similarity<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub a_norms: &'a [f64],
    pub b_norms: &'a [f64],
    pub tau: f64,
    pub norm_eps: f64,
}

impl Similarity<'_> {
    #[inline]
    pub fn denom(&self, i: usize, k: usize) -> f64 {
        (self.a_norms[i] * self.b_norms[k] + self.norm_eps) * self.tau
    }

    #[inline]
    pub fn sim(&self, i: usize, k: usize) -> f64 {
        self.a.column(i).dot(&self.b.column(k)) / self.denom(i, k)
    }

    /// Gradient of `sim(a_i, b_k)` with respect to `a_i`:
    /// `(b_k - s tau ||b_k|| a_i / ||a_i||) / denom`.
    pub fn grad_first(&self, i: usize, k: usize, out: &mut [f64], scale: f64) {
        let den = self.denom(i, k);
        let ai = self.a.column(i);
        let bk = self.b.column(k);
        let s = ai.dot(&bk) / den;
        let na = self.a_norms[i];
        let radial = if na > 0.0 {
            s * self.tau * self.b_norms[k] / na
        } else {
            0.0
        };
        for (o, (x, y)) in out.iter_mut().zip(ai.iter().zip(bk.iter())) {
            *o += scale * (y - radial * x) / den;
        }
    }
}

pub(crate) fn column_norms(x: &DMatrix<f64>) -> Vec<f64> {
    x.column_iter().map(|c| c.norm()).collect()
}

/// `log(sum_j exp(x_j))` shifted by the maximum. Returns `-inf` on empty
/// input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-anchor sample-level terms, anchor `(m, i)` at index `m * n + i`.
pub(crate) fn sample_anchor_terms(emb: &[DMatrix<f64>], tau: f64, norm_eps: f64) -> Vec<f64> {
    let v_count = emb.len();
    let n = emb[0].ncols();
    let norms: Vec<Vec<f64>> = emb.iter().map(column_norms).collect();
    par::map_range(v_count * n, |idx| {
        let (m, i) = (idx / n, idx % n);
        let mut all = Vec::with_capacity((v_count - 1) * n);
        let mut pos = Vec::with_capacity(v_count - 1);
        for v in (0..v_count).filter(|&v| v != m) {
            let sim = Similarity {
                a: &emb[m],
                b: &emb[v],
                a_norms: &norms[m],
                b_norms: &norms[v],
                tau,
                norm_eps,
            };
            for k in 0..n {
                let s = sim.sim(i, k);
                all.push(s);
                if k == i {
                    pos.push(s);
                }
            }
        }
        log_sum_exp(&all) - log_sum_exp(&pos)
    })
}

fn sum_view_means(terms: &[f64], v_count: usize, n: usize, what: &str) -> Result<f64> {
    if let Some(idx) = terms.iter().position(|t| !t.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what} anchor (view {}, sample {})",
            idx / n % v_count,
            idx % n
        )));
    }
    Ok(terms.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).sum())
}

/// CMC sample-level InfoNCE. With `n = 1` every anchor has no negatives
/// and the loss is exactly zero.
pub fn sample_infonce(p: &ProjectionStack, ds: &MultiViewDataset, h: &Hyperparams) -> Result<f64> {
    let emb = p.embed(ds)?;
    sample_infonce_from_embeddings(&emb, h)
}

pub fn sample_infonce_from_embeddings(emb: &[DMatrix<f64>], h: &Hyperparams) -> Result<f64> {
    check_views(emb)?;
    let n = emb[0].ncols();
    let terms = sample_anchor_terms(emb, h.tau1, h.norm_eps);
    sum_view_means(&terms, emb.len(), n, "sample-level")
}

fn check_views(mats: &[DMatrix<f64>]) -> Result<()> {
    if mats.len() < 2 {
        return Err(Error::Size(format!("need at least 2 views, got {}", mats.len())));
    }
    let n = mats[0].ncols();
    if n == 0 || mats.iter().any(|x| x.ncols() != n) {
        return Err(Error::Shape("views must share a non-zero sample count".into()));
    }
    Ok(())
}

/// Term of the structural loss for anchor column `i` of `W^m` against
/// view `v`: `lse_k sim(w_i^m, w_k^v) - sim(w_i^m, w_i^v)`.
pub(crate) fn structural_pair_term(sim: &Similarity<'_>, i: usize, n: usize) -> f64 {
    let logits: Vec<f64> = (0..n).map(|k| sim.sim(i, k)).collect();
    log_sum_exp(&logits) - logits[i]
}

/// Structural-level InfoNCE over all ordered view pairs `v != m`. The
/// denominator runs over every column of `W^v`, the positive included.
pub fn structural_contrastive(w: &CoefficientSet, h: &Hyperparams) -> Result<f64> {
    check_views(w.views())?;
    let v_count = w.n_views();
    let n = w.n_samples();
    let norms: Vec<Vec<f64>> = w.views().iter().map(column_norms).collect();
    let pairs: Vec<(usize, usize)> = (0..v_count)
        .flat_map(|m| (0..v_count).filter(move |&v| v != m).map(move |v| (m, v)))
        .collect();
    let terms = par::map_range(pairs.len() * n, |idx| {
        let (m, v) = pairs[idx / n];
        let sim = Similarity {
            a: w.view(m),
            b: w.view(v),
            a_norms: &norms[m],
            b_norms: &norms[v],
            tau: h.tau2,
            norm_eps: h.norm_eps,
        };
        structural_pair_term(&sim, idx % n, n)
    });
    if let Some(idx) = terms.iter().position(|t| !t.is_finite()) {
        let (m, v) = pairs[idx / n];
        return Err(Error::Numeric(format!(
            "structural anchor (view {m} against view {v}, sample {})",
            idx % n
        )));
    }
    Ok(terms.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).sum())
}

/// `sum_m alpha ||Y^m - Y^m W^m||_F^2 + beta ||W^m||_F^2`.
pub fn reconstruction_penalty(
    p: &ProjectionStack,
    ds: &MultiViewDataset,
    w: &CoefficientSet,
    h: &Hyperparams,
) -> Result<f64> {
    w.check_against(ds)?;
    let emb = p.embed(ds)?;
    Ok(emb
        .iter()
        .zip(w.views())
        .map(|(y, wm)| {
            let resid = y - y * wm;
            h.alpha * resid.norm_squared() + h.beta * wm.norm_squared()
        })
        .sum())
}

/// The three parts of the objective, kept apart for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub sample: f64,
    pub structural: f64,
    pub reconstruction: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.sample + self.lambda * (self.structural + self.reconstruction)
    }
}

pub fn loss_breakdown(
    p: &ProjectionStack,
    w: &CoefficientSet,
    ds: &MultiViewDataset,
    h: &Hyperparams,
) -> Result<LossBreakdown> {
    let out = LossBreakdown {
        sample: sample_infonce(p, ds, h)?,
        structural: structural_contrastive(w, h)?,
        reconstruction: reconstruction_penalty(p, ds, w, h)?,
        lambda: h.lambda,
    };
    if !out.total().is_finite() {
        return Err(Error::Numeric(format!("total loss ({out:?})")));
    }
    Ok(out)
}

/// `sample + lambda * (structural + reconstruction)`.
pub fn total_loss(p: &ProjectionStack, w: &CoefficientSet, ds: &MultiViewDataset, h: &Hyperparams) -> Result<f64> {
    loss_breakdown(p, w, ds, h).map(|b| b.total())
}
