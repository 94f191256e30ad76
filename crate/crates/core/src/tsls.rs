//! Two-stage least squares on first-differenced data with linear controls.
//!
//! Controls (and an intercept) are partialled out of `Ỹ`, `D̃` and `Z̃`; the
//! residuals then go through the same closed forms and cluster-robust
//! sandwiches as a single cross-fitting fold, without fold correction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dml::{aggregate, d_scale, estimate_fold, Residuals};
use crate::panel::DifferencedSample;
use crate::weak_iv::{ArVariance, IvInference};
use crate::{Error, Result};

/// Relative pivot size below which a design column counts as collinear.
pub const RANK_RTOL: f64 = 1e-10;

/// Which columns of the covariate pair enter linearly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Controls {
    /// Intercept only.
    None,
    /// Every current and lagged covariate.
    #[default]
    All,
    /// Named columns of the covariate pair.
    Columns(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TslsEstimate {
    pub theta: f64,
    pub pi: DVector<f64>,
    pub delta: DVector<f64>,
    pub sigma_theta: f64,
    pub sigma_pi: DMatrix<f64>,
    pub sigma_delta: DMatrix<f64>,
    pub ar_variance: ArVariance,
    pub n_units: usize,
    pub n_rows: usize,
    pub n_clusters: usize,
    pub model_rmse: f64,
    /// Mean squared residuals of `Ỹ`, `D̃` and each `Z̃` on the controls.
    pub mse_l: f64,
    pub mse_r: f64,
    pub mse_m: Vec<f64>,
    pub weak_denominator: bool,
    pub controls: Vec<String>,
    pub z_names: Vec<String>,
}

impl TslsEstimate {
    pub fn se_theta(&self) -> f64 {
        self.sigma_theta.max(0.0).sqrt()
    }
}

impl IvInference for TslsEstimate {
    fn pi(&self) -> &DVector<f64> {
        &self.pi
    }
    fn delta(&self) -> &DVector<f64> {
        &self.delta
    }
    fn sigma_pi(&self) -> &DMatrix<f64> {
        &self.sigma_pi
    }
    fn ar_variance(&self) -> &ArVariance {
        &self.ar_variance
    }
}

fn control_columns(fd: &DifferencedSample, controls: &Controls) -> Result<Vec<usize>> {
    match controls {
        Controls::None => Ok(Vec::new()),
        Controls::All => Ok((0..fd.xpair.ncols()).collect()),
        Controls::Columns(names) => names
            .iter()
            .map(|n| {
                fd.xpair_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::MissingColumn(n.clone()))
            })
            .collect(),
    }
}

/// Names of columns that a pivoted QR finds linearly dependent on earlier ones.
fn dependent_columns(m: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let k = r.nrows().min(r.ncols());
    let top = if k > 0 { r[(0, 0)].abs() } else { 0.0 };
    let rank = (0..k).take_while(|&i| r[(i, i)].abs() > RANK_RTOL * top.max(f64::MIN_POSITIVE)).count();
    if rank == m.ncols() {
        return Vec::new();
    }
    let mut order = DMatrix::from_fn(1, m.ncols(), |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    let perm: Vec<usize> = order.iter().map(|&v| v as usize).collect();
    let mut out: Vec<String> = perm[rank..].iter().map(|&j| names[j].clone()).collect();
    out.sort();
    out
}

/// Two-stage least squares with the chosen controls, clustered on the
/// sample's cluster ids.
pub fn estimate_2sls_fd(fd: &DifferencedSample, controls: &Controls) -> Result<TslsEstimate> {
    let n = fd.n_rows();
    let r = fd.n_instruments();
    let cols = control_columns(fd, controls)?;
    let c = cols.len();

    let mut names = vec!["(intercept)".to_string()];
    names.extend(cols.iter().map(|&j| fd.xpair_names[j].clone()));
    names.extend(fd.z_names.iter().cloned());
    let full = DMatrix::from_fn(n, 1 + c + r, |i, j| {
        if j == 0 {
            1.0
        } else if j <= c {
            fd.xpair[(i, cols[j - 1])]
        } else {
            fd.ztilde[(i, j - 1 - c)]
        }
    });
    if n < 1 + c + r {
        return Err(Error::RankDeficient { columns: names });
    }
    let bad = dependent_columns(&full, &names);
    if !bad.is_empty() {
        return Err(Error::RankDeficient { columns: bad });
    }

    let w = full.columns(0, 1 + c).into_owned();
    let qr = w.qr();
    let q = qr.q();
    let partial = |v: DVector<f64>| -> DVector<f64> {
        let proj = &q * (q.transpose() * &v);
        v - proj
    };
    let ey = partial(DVector::from_column_slice(&fd.ytilde));
    let ed = partial(DVector::from_column_slice(&fd.dtilde));
    let mut v = DMatrix::zeros(n, r);
    for j in 0..r {
        v.set_column(j, &partial(fd.ztilde.column(j).into_owned()));
    }
    let res = Residuals {
        ey: ey.iter().cloned().collect(),
        ed: ed.iter().cloned().collect(),
        v,
    };
    let fold = estimate_fold(&res, &fd.cluster, fd.n_clusters(), fd.n_units(), d_scale(fd))?;
    let agg = aggregate(std::slice::from_ref(&fold))?;
    let sse: f64 = (0..n).map(|i| (res.ey[i] - res.ed[i] * agg.theta).powi(2)).sum();
    let msq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / n as f64;
    Ok(TslsEstimate {
        theta: agg.theta,
        pi: agg.pi,
        delta: agg.delta,
        sigma_theta: agg.sigma_theta,
        sigma_pi: agg.sigma_pi,
        sigma_delta: agg.sigma_delta,
        ar_variance: agg.ar_variance,
        n_units: fd.n_units(),
        n_rows: n,
        n_clusters: fd.n_clusters(),
        model_rmse: (sse / n as f64).sqrt(),
        mse_l: msq(&res.ey),
        mse_r: msq(&res.ed),
        mse_m: (0..r).map(|j| msq(res.v.column(j).as_slice())).collect(),
        weak_denominator: fold.weak_denominator,
        controls: names[1..1 + c].to_vec(),
        z_names: fd.z_names.clone(),
    })
}
