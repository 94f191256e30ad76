//! Small dense linear-algebra and summary helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Relative eigenvalue floor below which a symmetric matrix counts as singular.
pub const SINGULAR_RTOL: f64 = 1e-12;

/// Inverse of a symmetric positive definite matrix.
///
/// Fails with [`Error::Singular`] when the smallest eigenvalue is not
/// positive relative to the largest.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() || n == 0 {
        return Err(Error::Dimension(format!("{what}: expected a square matrix")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what} has non-finite entries")));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= SINGULAR_RTOL * max {
        return Err(Error::Singular(format!("{what} is not positive definite")));
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let q = &eig.eigenvectors;
    Ok(q * inv_diag * q.transpose())
}

/// Quadratic form `v' A v`.
pub fn quad_form(a: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * a * v)[(0, 0)]
}

/// Bilinear form `u' A v`.
pub fn bilinear(u: &DVector<f64>, a: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (u.transpose() * a * v)[(0, 0)]
}

/// Sum over clusters of the outer product of within-cluster score sums.
///
/// `scores` is n×r, `cluster[i]` a dense index below `n_clusters`.
pub fn cluster_meat(scores: &DMatrix<f64>, cluster: &[usize], n_clusters: usize) -> DMatrix<f64> {
    let r = scores.ncols();
    let mut sums = DMatrix::<f64>::zeros(n_clusters, r);
    for (i, &c) in cluster.iter().enumerate() {
        for j in 0..r {
            sums[(c, j)] += scores[(i, j)];
        }
    }
    sums.transpose() * sums
}

/// Re-index arbitrary ids to `0..m` in order of first appearance.
pub fn dense_ids(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = ids
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect();
    (out, map.len())
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with the `n − 1` denominator.
pub fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(v: &[f64]) -> f64 {
    sample_variance(v).sqrt()
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return f64::NAN;
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Rows of `m` selected by `idx`.
pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

pub fn select<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}
