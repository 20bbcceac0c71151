//! Random instances and brute-force reference implementations written
//! directly from the loss definitions with plain loops and no
//! log-sum-exp shifting.

#![allow(dead_code, clippy::needless_range_loop)]

use mfedch::{CoefficientSet, Hyperparams, MultiViewDataset, ProjectionStack};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub ds: MultiViewDataset,
    pub p: ProjectionStack,
    pub w: CoefficientSet,
    pub h: Hyperparams,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random instance with the given shape; temperatures and weights are
/// randomized too so no term is trivially unit-weighted.
pub fn instance(seed: u64, n: usize, dims: &[usize], d: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = dims.iter().map(|&dm| gaussian(&mut rng, dm, n, 1.0)).collect();
    let ds = MultiViewDataset::new(views, None).unwrap();
    let blocks: Vec<DMatrix<f64>> = dims.iter().map(|&dm| gaussian(&mut rng, dm, d, 0.7)).collect();
    let p = ProjectionStack::from_blocks(&blocks).unwrap();
    let w = CoefficientSet::new(
        dims.iter()
            .map(|_| gaussian(&mut rng, n, n, 0.5).add_scalar(1.0 / n as f64))
            .collect(),
    )
    .unwrap();
    let h = Hyperparams {
        d,
        lambda: rng.random_range(0.5..2.0),
        alpha: rng.random_range(0.2..1.5),
        beta: rng.random_range(0.2..1.5),
        tau1: rng.random_range(0.5..2.0),
        tau2: rng.random_range(0.5..2.0),
        ..Hyperparams::default()
    };
    Instance { ds, p, w, h }
}

/// Random shape within `n <= max_n`, `V <= 3`, `D_m <= max_dim`,
/// `d <= min(3, min D_m)`.
pub fn random_instance(seed: u64, max_n: usize, max_dim: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD_EF01);
    let v = rng.random_range(2..=3);
    let n = rng.random_range(2..=max_n);
    let dims: Vec<usize> = (0..v).map(|_| rng.random_range(1..=max_dim)).collect();
    let dmax = (*dims.iter().min().unwrap()).min(3);
    let d = rng.random_range(1..=dmax);
    instance(seed, n, &dims, d)
}

pub type Mat = Vec<Vec<f64>>; // [row][col]

pub fn to_rows(x: &DMatrix<f64>) -> Mat {
    (0..x.nrows())
        .map(|r| (0..x.ncols()).map(|c| x[(r, c)]).collect())
        .collect()
}

pub fn column(x: &Mat, c: usize) -> Vec<f64> {
    x.iter().map(|row| row[c]).collect()
}

pub fn cos(u: &[f64], v: &[f64], tau: f64, eps: f64) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for j in 0..u.len() {
        dot += u[j] * v[j];
        nu += u[j] * u[j];
        nv += v[j] * v[j];
    }
    dot / ((nu.sqrt() * nv.sqrt() + eps) * tau)
}

/// `y_i^m = P^T x~_i^m` with the zero-padded sample built explicitly.
pub fn embeddings(p: &DMatrix<f64>, ds: &MultiViewDataset) -> Vec<Vec<Vec<f64>>> {
    let total = p.nrows();
    let d = p.ncols();
    let mut offset = 0;
    let mut out = Vec::new();
    for x in ds.views() {
        let mut per_sample = Vec::new();
        for i in 0..x.ncols() {
            let mut padded = vec![0.0; total];
            for r in 0..x.nrows() {
                padded[offset + r] = x[(r, i)];
            }
            let mut y = vec![0.0; d];
            for (c, yc) in y.iter_mut().enumerate() {
                for (r, xr) in padded.iter().enumerate() {
                    *yc += p[(r, c)] * xr;
                }
            }
            per_sample.push(y);
        }
        offset += x.nrows();
        out.push(per_sample);
    }
    out
}

/// Sample-level loss enumerating every (anchor, positive, negative).
pub fn sample_oracle(p: &DMatrix<f64>, ds: &MultiViewDataset, h: &Hyperparams) -> f64 {
    let y = embeddings(p, ds);
    let v_count = y.len();
    let n = y[0].len();
    let mut total = 0.0;
    for m in 0..v_count {
        let mut acc = 0.0;
        for i in 0..n {
            let mut pos = 0.0;
            let mut neg = 0.0;
            for v in 0..v_count {
                if v == m {
                    continue;
                }
                pos += cos(&y[m][i], &y[v][i], h.tau1, h.norm_eps).exp();
                for k in 0..n {
                    if k != i {
                        neg += cos(&y[m][i], &y[v][k], h.tau1, h.norm_eps).exp();
                    }
                }
            }
            acc += -(pos / (pos + neg)).ln();
        }
        total += acc / n as f64;
    }
    total
}

pub fn structural_oracle(w: &[Mat], h: &Hyperparams) -> f64 {
    let v_count = w.len();
    let n = w[0].len();
    let mut total = 0.0;
    for m in 0..v_count {
        for v in 0..v_count {
            if v == m {
                continue;
            }
            let mut acc = 0.0;
            for i in 0..n {
                let wi = column(&w[m], i);
                let num = cos(&wi, &column(&w[v], i), h.tau2, h.norm_eps).exp();
                let mut den = 0.0;
                for k in 0..n {
                    den += cos(&wi, &column(&w[v], k), h.tau2, h.norm_eps).exp();
                }
                acc += -(num / den).ln();
            }
            total += acc / n as f64;
        }
    }
    total
}

pub fn reconstruction_oracle(p: &DMatrix<f64>, ds: &MultiViewDataset, w: &[Mat], h: &Hyperparams) -> f64 {
    let y = embeddings(p, ds);
    let mut total = 0.0;
    for (m, ym) in y.iter().enumerate() {
        let n = ym.len();
        let d = ym[0].len();
        let mut resid = 0.0;
        for r in 0..d {
            for i in 0..n {
                let mut recon = 0.0;
                for k in 0..n {
                    recon += ym[k][r] * w[m][k][i];
                }
                resid += (ym[i][r] - recon).powi(2);
            }
        }
        let mut ridge = 0.0;
        for row in &w[m] {
            for x in row {
                ridge += x * x;
            }
        }
        total += h.alpha * resid + h.beta * ridge;
    }
    total
}

pub fn total_oracle(p: &DMatrix<f64>, ds: &MultiViewDataset, w: &[Mat], h: &Hyperparams) -> f64 {
    sample_oracle(p, ds, h) + h.lambda * (structural_oracle(w, h) + reconstruction_oracle(p, ds, w, h))
}

/// Terms of the total loss in which `w_i^m` is the structural anchor or
/// the reconstruction target, with `w_i^m` replaced by `col`.
pub fn column_oracle(
    i: usize,
    m: usize,
    col: &[f64],
    p: &DMatrix<f64>,
    ds: &MultiViewDataset,
    w: &[Mat],
    h: &Hyperparams,
) -> f64 {
    let y = embeddings(p, ds);
    let n = col.len();
    let mut contrastive = 0.0;
    for v in 0..w.len() {
        if v == m {
            continue;
        }
        let num = cos(col, &column(&w[v], i), h.tau2, h.norm_eps).exp();
        let mut den = 0.0;
        for k in 0..n {
            den += cos(col, &column(&w[v], k), h.tau2, h.norm_eps).exp();
        }
        contrastive += -(num / den).ln() / n as f64;
    }
    let d = y[m][0].len();
    let mut resid = 0.0;
    for r in 0..d {
        let mut recon = 0.0;
        for k in 0..n {
            recon += y[m][k][r] * col[k];
        }
        resid += (y[m][i][r] - recon).powi(2);
    }
    let ridge: f64 = col.iter().map(|x| x * x).sum();
    h.lambda * (contrastive + h.alpha * resid + h.beta * ridge)
}

pub fn w_rows(w: &CoefficientSet) -> Vec<Mat> {
    w.views().iter().map(to_rows).collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}
