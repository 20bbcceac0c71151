//! Numerical checks of the algebra behind the reconstruction term.
//!
//! For a coefficient matrix `W` whose columns each sum to one,
//! `M = (I - W)(I - W)^T` has zero column (and, by symmetry, row) sums, so
//! with `S = W + W^T - W W^T`:
//!
//! ```text
//! ||Y - Y W||_F^2 = tr(Y M Y^T) = 1/2 sum_{i,k} ||y_i - y_k||^2 S_{i,k}
//! ```
//!
//! The trainer leaves `W` unconstrained, so checks on trained coefficients
//! run on an L1-normalized copy (see [`normalize_columns`]).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::losses::CoefficientSet;

/// Column-sum tolerance for the "columns sum to one" precondition.
pub const COLUMN_SUM_TOL: f64 = 1e-8;

/// `S = W + W^T - W W^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterMatrix {
    pub s: DMatrix<f64>,
}

pub fn scatter_matrix(w: &DMatrix<f64>) -> Result<ScatterMatrix> {
    require_square(w)?;
    let wwt = w * w.transpose();
    // symmetrize the product so S == S^T holds exactly
    let wwt = (&wwt + wwt.transpose()) * 0.5;
    Ok(ScatterMatrix {
        s: w + w.transpose() - wwt,
    })
}

fn require_square(w: &DMatrix<f64>) -> Result<()> {
    if !w.is_square() {
        return Err(Error::Shape(format!(
            "W is {}x{}, expected square",
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(())
}

/// Largest `|1 - sum_i W_{i,k}|` over columns.
pub fn column_sum_deviation(w: &DMatrix<f64>) -> f64 {
    w.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max)
}

fn require_unit_column_sums(w: &DMatrix<f64>) -> Result<()> {
    require_square(w)?;
    let dev = column_sum_deviation(w);
    if !(dev <= COLUMN_SUM_TOL) {
        return Err(Error::Precondition(format!(
            "columns of W must sum to 1 (worst deviation {dev:e})"
        )));
    }
    Ok(())
}

/// Divides every column by its sum. Fails on a column whose sum is
/// (numerically) zero.
pub fn normalize_columns(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = w.clone();
    for (k, mut col) in out.column_iter_mut().enumerate() {
        let sum = col.sum();
        let scale = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(sum.abs() > 1e-12 * scale.max(1e-300)) {
            return Err(Error::Precondition(format!(
                "column {k} sums to {sum:e}; cannot normalize"
            )));
        }
        col /= sum;
    }
    Ok(out)
}

/// `max_k |sum_i [(I - W)(I - W)^T]_{i,k}|` without checking column sums.
pub fn column_sum_residual_unchecked(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    let a = DMatrix::identity(n, n) - w;
    let m = &a * a.transpose();
    m.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max)
}

/// Column-sum residual of `(I - W)(I - W)^T`; requires unit column sums.
pub fn column_sum_residual(w: &DMatrix<f64>) -> Result<f64> {
    require_unit_column_sums(w)?;
    Ok(column_sum_residual_unchecked(w))
}

/// `| tr(Y (I-W)(I-W)^T Y^T) - 1/2 sum_{i,k} ||y_i - y_k||^2 S_{i,k} |`.
pub fn laplacian_equivalence_gap(y: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    require_unit_column_sums(w)?;
    if y.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "Y has {} columns, W is {}x{}",
            y.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    let n = w.nrows();
    let a = DMatrix::identity(n, n) - w;
    let resid = y * &a;
    let trace_form = resid.norm_squared();

    let s = scatter_matrix(w)?.s;
    let mut pairwise = 0.0;
    for i in 0..n {
        for k in 0..n {
            let dist = (y.column(i) - y.column(k)).norm_squared();
            pairwise += dist * s[(i, k)];
        }
    }
    Ok((trace_form - 0.5 * pairwise).abs())
}

/// The bound [`laplacian_equivalence_gap`] is held to: `1e-8 (1 + ||Y||_F^2)`.
pub fn laplacian_gap_bound(y: &DMatrix<f64>) -> f64 {
    1e-8 * (1.0 + y.norm_squared())
}

fn plain_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine between `w_i^m` and `w_i^v` over ordered view pairs `v != m`
/// and samples `i`. A zero column contributes 0.
pub fn cross_view_alignment(w: &CoefficientSet) -> Result<f64> {
    let v_count = w.n_views();
    if v_count < 2 {
        return Err(Error::Size(format!("need at least 2 views, got {v_count}")));
    }
    let n = w.n_samples();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in 0..v_count {
        for v in (0..v_count).filter(|&v| v != m) {
            for i in 0..n {
                total += plain_cosine(w.view(m).column(i).as_slice(), w.view(v).column(i).as_slice());
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_of_identity_and_zero() {
        let eye = DMatrix::<f64>::identity(4, 4);
        assert_eq!(scatter_matrix(&eye).unwrap().s, eye);
        let zero = DMatrix::<f64>::zeros(3, 3);
        assert_eq!(scatter_matrix(&zero).unwrap().s, zero);
        assert!(scatter_matrix(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn uniform_columns_conform() {
        let w = DMatrix::from_element(5, 5, 0.2);
        assert!(column_sum_residual(&w).unwrap() <= 1e-12);
    }

    #[test]
    fn doubled_identity_is_rejected() {
        let w = DMatrix::<f64>::identity(3, 3) * 2.0;
        assert!(matches!(column_sum_residual(&w), Err(Error::Precondition(_))));
        let y = DMatrix::zeros(2, 3);
        assert!(matches!(laplacian_equivalence_gap(&y, &w), Err(Error::Precondition(_))));
    }

    #[test]
    fn gap_vanishes_for_zero_and_constant_embeddings() {
        let w = normalize_columns(&DMatrix::from_fn(4, 4, |r, c| 1.0 + ((r * 3 + c * 5) % 7) as f64)).unwrap();
        assert_eq!(laplacian_equivalence_gap(&DMatrix::zeros(2, 4), &w).unwrap(), 0.0);
        let y = DMatrix::from_fn(3, 4, |r, _| r as f64 - 1.5);
        assert!(laplacian_equivalence_gap(&y, &w).unwrap() < 1e-12);
    }

    #[test]
    fn normalize_rejects_zero_sum() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 2.0]);
        assert!(normalize_columns(&w).is_err());
    }

    #[test]
    fn alignment_extremes() {
        let w = DMatrix::from_fn(3, 3, |r, c| (r + 2 * c) as f64 + 0.5);
        let same = CoefficientSet::new(vec![w.clone(), w.clone(), w]).unwrap();
        assert!((cross_view_alignment(&same).unwrap() - 1.0).abs() < 1e-15);

        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let orth = CoefficientSet::new(vec![a, b]).unwrap();
        assert_eq!(cross_view_alignment(&orth).unwrap(), 0.0);
    }
}
