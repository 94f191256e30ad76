//! Unpenalized least squares with an intercept.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    /// Column means subtracted before solving.
    pub center: Vec<f64>,
}

impl LinearModel {
    pub fn predict_row(&self, row: impl Iterator<Item = f64>) -> f64 {
        self.intercept
            + row
                .zip(self.coef.iter().zip(&self.center))
                .map(|(v, (b, m))| b * (v - m))
                .sum::<f64>()
    }
}

/// Ordinary least squares on centred columns.
///
/// Uses a QR solve; a rank-deficient design falls back to the minimum-norm
/// SVD solution.
pub fn fit_linear(x: &DMatrix<f64>, y: &[f64]) -> Result<LinearModel> {
    let (n, p) = x.shape();
    if n != y.len() || n == 0 {
        return Err(Error::Dimension("x and y must have the same positive number of rows".into()));
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    let center: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    if p == 0 {
        return Ok(LinearModel { intercept: ybar, coef: vec![], center });
    }
    let mut xc = x.clone();
    for (j, m) in center.iter().enumerate() {
        xc.column_mut(j).add_scalar_mut(-m);
    }
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));

    let qr = xc.clone().qr();
    let r = qr.r();
    let rmax = r.diagonal().amax();
    let full_rank = n >= p && r.diagonal().iter().all(|d| d.abs() > 1e-10 * rmax.max(f64::MIN_POSITIVE));
    let coef = if full_rank {
        let qty = qr.q().transpose() * &yc;
        r.solve_upper_triangular(&qty)
            .ok_or_else(|| Error::Singular("least squares".into()))?
    } else {
        xc.svd(true, true)
            .solve(&yc, 1e-10 * rmax.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Singular(e.to_string()))?
    };
    Ok(LinearModel {
        intercept: ybar,
        coef: coef.iter().cloned().collect(),
        center,
    })
}
