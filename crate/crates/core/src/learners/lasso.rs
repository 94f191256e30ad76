//! L1-penalized least squares by covariance-updating coordinate descent,
//! with the penalty chosen by K-fold cross-validation.
//!
//! The objective on standardized columns is
//! `(1/2n)·‖y − ȳ − Xβ‖² + λ‖β‖₁`. Everything is driven from per-block
//! sufficient statistics (`Σx`, `Σxx'`, `Σy`, `Σy²`, `Σxy`), so one
//! [`LassoWorkspace`] serves many targets and many train/validation splits
//! over the same design.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Penalty grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaChoice {
    /// `n_lambda` log-spaced values from `λ_max` down to `min_ratio·λ_max`.
    /// Without an explicit ratio it is 1e−4, or 1e−2 when the training
    /// rows are fewer than the features.
    Auto { n_lambda: usize, min_ratio: Option<f64> },
    /// Explicit values, used in decreasing order.
    Grid(Vec<f64>),
}

impl Default for LambdaChoice {
    fn default() -> Self {
        LambdaChoice::Auto {
            n_lambda: 100,
            min_ratio: None,
        }
    }
}

/// Inner coordinate-descent convergence threshold, relative to `Var(y)`.
const CD_THRESH: f64 = 1e-7;
const MAX_SWEEPS: usize = 100_000;
const PATH_DEV_MAX: f64 = 0.999;
const MIN_RATIO_TALL: f64 = 1e-4;
const MIN_RATIO_WIDE: f64 = 1e-2;
const PATH_FDEV: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LassoModel {
    /// Prediction at `x = center`.
    pub intercept: f64,
    /// Non-zero slopes on the original scale, as `(column, value)`.
    pub coef: Vec<(usize, f64)>,
    pub center: Vec<f64>,
    pub lambda: f64,
    /// `(λ, mean CV squared error)` over the evaluated path; empty without CV.
    pub cv_path: Vec<(f64, f64)>,
    pub n_features: usize,
}

impl LassoModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let all: Vec<usize> = (0..x.nrows()).collect();
        self.predict_rows(x, &all)
    }

    /// Predictions for selected rows of `x`.
    pub fn predict_rows(&self, x: &DMatrix<f64>, rows: &[usize]) -> Vec<f64> {
        assert_eq!(x.ncols(), self.n_features, "feature dimension mismatch");
        let mut out = vec![self.intercept; rows.len()];
        for &(j, b) in &self.coef {
            let col = x.column(j);
            let m = self.center[j];
            for (o, &i) in out.iter_mut().zip(rows) {
                *o += b * (col[i] - m);
            }
        }
        out
    }

    /// Dense coefficient vector on the original scale.
    pub fn dense_coef(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.n_features];
        for &(j, b) in &self.coef {
            v[j] = b;
        }
        v
    }
}

#[derive(Debug, Clone)]
struct XMoments {
    n: usize,
    sx: DVector<f64>,
    sxx: DMatrix<f64>,
}

impl XMoments {
    fn zeros(q: usize) -> Self {
        XMoments {
            n: 0,
            sx: DVector::zeros(q),
            sxx: DMatrix::zeros(q, q),
        }
    }

    fn add(&mut self, o: &XMoments) {
        self.n += o.n;
        self.sx += &o.sx;
        self.sxx += &o.sxx;
    }

    fn sub(&mut self, o: &XMoments) {
        self.n -= o.n;
        self.sx -= &o.sx;
        self.sxx -= &o.sxx;
    }
}

#[derive(Debug, Clone)]
struct YMoments {
    sy: f64,
    syy: f64,
    sxy: DVector<f64>,
}

impl YMoments {
    fn sum<'a>(q: usize, it: impl Iterator<Item = &'a YMoments>) -> YMoments {
        let mut m = YMoments {
            sy: 0.0,
            syy: 0.0,
            sxy: DVector::zeros(q),
        };
        for o in it {
            m.sy += o.sy;
            m.syy += o.syy;
            m.sxy += &o.sxy;
        }
        m
    }
}

/// Standardized Gram matrix of a training set.
#[derive(Debug, Clone)]
struct Standardized {
    n: f64,
    mu: Vec<f64>,
    sd: Vec<f64>,
    eligible: Vec<bool>,
    gram: DMatrix<f64>,
}

fn standardize(m: &XMoments) -> Standardized {
    let q = m.sx.len();
    let n = m.n as f64;
    let mu: Vec<f64> = m.sx.iter().map(|s| s / n).collect();
    let mut sd = vec![0.0; q];
    let mut eligible = vec![false; q];
    for j in 0..q {
        let raw = m.sxx[(j, j)] / n;
        let var = raw - mu[j] * mu[j];
        if var > 1e-13 * raw.max(f64::MIN_POSITIVE) && var > 0.0 {
            sd[j] = var.sqrt();
            eligible[j] = true;
        }
    }
    let mut gram = DMatrix::<f64>::zeros(q, q);
    for k in 0..q {
        if !eligible[k] {
            continue;
        }
        for j in 0..q {
            if eligible[j] {
                gram[(j, k)] = (m.sxx[(j, k)] / n - mu[j] * mu[k]) / (sd[j] * sd[k]);
            }
        }
        gram[(k, k)] = 1.0;
    }
    Standardized {
        n,
        mu,
        sd,
        eligible,
        gram,
    }
}

/// Per-target statistics over the blocks of a workspace.
#[derive(Debug, Clone)]
pub struct LassoTarget {
    ybar: f64,
    blocks: Vec<YMoments>,
}

/// A training set and its cross-validation splits, with Gram matrices built.
#[derive(Debug, Clone)]
pub struct PreparedFit {
    train: Vec<usize>,
    full: Standardized,
    cv: Vec<CvSplit>,
}

#[derive(Debug, Clone)]
struct CvSplit {
    held_out: Vec<usize>,
    train: Standardized,
    held: XMoments,
}

/// Design matrix with precomputed block moments.
#[derive(Debug, Clone)]
pub struct LassoWorkspace {
    xc: DMatrix<f64>,
    center: Vec<f64>,
    block_rows: Vec<Vec<usize>>,
    blocks: Vec<XMoments>,
}

fn gram_of_rows(xc: &DMatrix<f64>, rows: &[usize]) -> XMoments {
    let q = xc.ncols();
    let nb = rows.len();
    let mut sub = DMatrix::<f64>::zeros(nb, q);
    for j in 0..q {
        let src = xc.column(j);
        let mut dst = sub.column_mut(j);
        for (r, &i) in rows.iter().enumerate() {
            dst[r] = src[i];
        }
    }
    let sx = DVector::from_iterator(q, (0..q).map(|j| sub.column(j).sum()));
    let mut sxx = DMatrix::<f64>::zeros(q, q);
    if nb > 0 && q > 0 {
        // sxx = subᵀ·sub, all column-major.
        unsafe {
            matrixmultiply::dgemm(
                q,
                nb,
                q,
                1.0,
                sub.as_ptr(),
                nb as isize,
                1,
                sub.as_ptr(),
                1,
                nb as isize,
                0.0,
                sxx.as_mut_ptr(),
                1,
                q as isize,
            );
        }
    }
    XMoments { n: nb, sx, sxx }
}

impl LassoWorkspace {
    /// Centre `x` and accumulate moments for each block of rows.
    pub fn new(x: &DMatrix<f64>, block_rows: Vec<Vec<usize>>) -> LassoWorkspace {
        let (n, q) = x.shape();
        let center: Vec<f64> = (0..q).map(|j| x.column(j).sum() / n.max(1) as f64).collect();
        let mut xc = x.clone();
        for (j, m) in center.iter().enumerate() {
            xc.column_mut(j).add_scalar_mut(-m);
        }
        let blocks = block_rows.iter().map(|rows| gram_of_rows(&xc, rows)).collect();
        LassoWorkspace {
            xc,
            center,
            block_rows,
            blocks,
        }
    }

    pub fn n_features(&self) -> usize {
        self.center.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn target(&self, y: &[f64]) -> LassoTarget {
        assert_eq!(y.len(), self.xc.nrows(), "target length must match design rows");
        let ybar = y.iter().sum::<f64>() / y.len().max(1) as f64;
        let q = self.n_features();
        let blocks = self
            .block_rows
            .iter()
            .map(|rows| {
                let yc: Vec<f64> = rows.iter().map(|&i| y[i] - ybar).collect();
                let sxy = DVector::from_iterator(
                    q,
                    (0..q).map(|j| {
                        let col = self.xc.column(j);
                        rows.iter().zip(&yc).map(|(&i, v)| col[i] * v).sum::<f64>()
                    }),
                );
                YMoments {
                    sy: yc.iter().sum(),
                    syy: yc.iter().map(|v| v * v).sum(),
                    sxy,
                }
            })
            .collect();
        LassoTarget { ybar, blocks }
    }

    /// Build Gram matrices for training blocks `train`, validated by holding
    /// out each group of `cv_groups` (a partition of `train`) in turn.
    pub fn prepare(&self, train: &[usize], cv_groups: &[Vec<usize>]) -> PreparedFit {
        let q = self.n_features();
        let mut total = XMoments::zeros(q);
        for &b in train {
            total.add(&self.blocks[b]);
        }
        let cv = cv_groups
            .iter()
            .map(|g| {
                let mut held = XMoments::zeros(q);
                for &b in g {
                    held.add(&self.blocks[b]);
                }
                let mut rest = total.clone();
                rest.sub(&held);
                CvSplit {
                    held_out: g.clone(),
                    train: standardize(&rest),
                    held,
                }
            })
            .collect();
        PreparedFit {
            train: train.to_vec(),
            full: standardize(&total),
            cv,
        }
    }

    /// Fit on the prepared training set, choosing λ by minimum CV error.
    pub fn fit(&self, prep: &PreparedFit, target: &LassoTarget, lambda: &LambdaChoice) -> Result<LassoModel> {
        let q = self.n_features();
        let ym = YMoments::sum(q, prep.train.iter().map(|&b| &target.blocks[b]));
        let full = &prep.full;
        let (ybar_t, var_y, c) = target_stats(full, &ym);

        let lambdas = match lambda {
            LambdaChoice::Auto { n_lambda, min_ratio } => {
                let min_ratio = min_ratio.unwrap_or(if (full.n as usize) < q { MIN_RATIO_WIDE } else { MIN_RATIO_TALL });
                if *n_lambda == 0 || !(min_ratio > 0.0 && min_ratio < 1.0) {
                    return Err(Error::InvalidArgument("lasso grid needs n_lambda ≥ 1 and min_ratio in (0,1)".into()));
                }
                let lmax = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if lmax <= 0.0 || var_y <= 0.0 {
                    return Ok(self.constant_model(target.ybar + ybar_t));
                }
                if *n_lambda == 1 {
                    vec![lmax]
                } else {
                    (0..*n_lambda)
                        .map(|i| lmax * min_ratio.powf(i as f64 / (*n_lambda - 1) as f64))
                        .collect()
                }
            }
            LambdaChoice::Grid(v) => {
                if v.is_empty() || v.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
                    return Err(Error::InvalidArgument("lasso λ values must be positive".into()));
                }
                let mut v = v.clone();
                v.sort_by(|a, b| b.total_cmp(a));
                v
            }
        };
        if var_y <= 0.0 {
            return Ok(self.constant_model(target.ybar + ybar_t));
        }

        let mut path: Vec<Vec<(usize, f64)>> = Vec::new();
        let stop_rules = matches!(lambda, LambdaChoice::Auto { .. });
        cd_path(&full.gram, &c, &full.eligible, &lambdas, var_y, stop_rules, |_, beta, active| {
            path.push(active.iter().filter(|&&j| beta[j] != 0.0).map(|&j| (j, beta[j])).collect());
        });
        let used = &lambdas[..path.len()];

        let (best, cv_path) = if used.len() == 1 || prep.cv.is_empty() {
            (0, Vec::new())
        } else {
            let mut sse = vec![0.0; used.len()];
            let mut n_held = 0.0;
            for split in &prep.cv {
                let ym_tr = YMoments::sum(
                    q,
                    prep.train
                        .iter()
                        .filter(|b| !split.held_out.contains(b))
                        .map(|&b| &target.blocks[b]),
                );
                let ym_ho = YMoments::sum(q, split.held_out.iter().map(|&b| &target.blocks[b]));
                let (ybar_s, var_s, c_s) = target_stats(&split.train, &ym_tr);
                n_held += split.held.n as f64;
                if var_s <= 0.0 {
                    for s in sse.iter_mut() {
                        *s += held_out_sse(&split.train, ybar_s, &[], &split.held, &ym_ho);
                    }
                    continue;
                }
                cd_path(&split.train.gram, &c_s, &split.train.eligible, used, var_s, false, |k, beta, active| {
                    let nz: Vec<(usize, f64)> =
                        active.iter().filter(|&&j| beta[j] != 0.0).map(|&j| (j, beta[j])).collect();
                    sse[k] += held_out_sse(&split.train, ybar_s, &nz, &split.held, &ym_ho);
                });
            }
            let cvm: Vec<f64> = sse.iter().map(|s| s / n_held).collect();
            let mut best = 0;
            for k in 1..cvm.len() {
                if cvm[k] < cvm[best] {
                    best = k;
                }
            }
            (best, used.iter().cloned().zip(cvm).collect())
        };

        let (a, coef) = to_original(full, ybar_t, &path[best]);
        Ok(LassoModel {
            intercept: target.ybar + a,
            coef,
            center: self.center.clone(),
            lambda: used[best],
            cv_path,
            n_features: q,
        })
    }

    fn constant_model(&self, value: f64) -> LassoModel {
        LassoModel {
            intercept: value,
            coef: vec![],
            center: self.center.clone(),
            lambda: f64::INFINITY,
            cv_path: vec![],
            n_features: self.n_features(),
        }
    }
}

/// Training mean of centred y, its variance and the standardized `X'y/n`.
fn target_stats(s: &Standardized, ym: &YMoments) -> (f64, f64, Vec<f64>) {
    let ybar = ym.sy / s.n;
    let var_y = (ym.syy / s.n - ybar * ybar).max(0.0);
    let c = (0..s.mu.len())
        .map(|j| {
            if s.eligible[j] {
                (ym.sxy[j] / s.n - s.mu[j] * ybar) / s.sd[j]
            } else {
                0.0
            }
        })
        .collect();
    (ybar, var_y, c)
}

/// Intercept (at the workspace centre) and original-scale slopes.
fn to_original(s: &Standardized, ybar: f64, beta: &[(usize, f64)]) -> (f64, Vec<(usize, f64)>) {
    let coef: Vec<(usize, f64)> = beta.iter().map(|&(j, b)| (j, b / s.sd[j])).collect();
    let a = ybar - coef.iter().map(|&(j, b)| b * s.mu[j]).sum::<f64>();
    (a, coef)
}

fn held_out_sse(s: &Standardized, ybar: f64, beta: &[(usize, f64)], h: &XMoments, ym: &YMoments) -> f64 {
    let (a, b) = to_original(s, ybar, beta);
    let n = h.n as f64;
    let mut v = ym.syy - 2.0 * a * ym.sy + n * a * a;
    for &(j, bj) in &b {
        v += -2.0 * bj * ym.sxy[j] + 2.0 * a * bj * h.sx[j];
        for &(k, bk) in &b {
            v += bj * bk * h.sxx[(j, k)];
        }
    }
    v.max(0.0)
}

fn soft(z: f64, l: f64) -> f64 {
    if z > l {
        z - l
    } else if z < -l {
        z + l
    } else {
        0.0
    }
}

/// Warm-started coordinate descent over a decreasing λ sequence.
///
/// `visit(k, β, active)` is called after convergence at `lambdas[k]`.
/// With `stop_rules` the path ends early once the explained deviance
/// saturates. Inner sweeps run on a compact copy of the active block of
/// the Gram matrix; the full gradient is refreshed before each KKT check.
fn cd_path(
    gram: &DMatrix<f64>,
    c: &[f64],
    eligible: &[bool],
    lambdas: &[f64],
    var_y: f64,
    stop_rules: bool,
    mut visit: impl FnMut(usize, &[f64], &[usize]),
) {
    let q = c.len();
    let mut beta = vec![0.0; q];
    let mut resid = c.to_vec();
    let mut active: Vec<usize> = Vec::new();
    let mut in_active = vec![false; q];
    // acol[a][i] = G[active[i], active[a]].
    let mut acol: Vec<Vec<f64>> = Vec::new();
    let mut ab: Vec<f64> = Vec::new();
    let mut ar: Vec<f64> = Vec::new();
    let tol = CD_THRESH * var_y;
    let mut prev_frac = 0.0;

    for (k, &lam) in lambdas.iter().enumerate() {
        let mut sweeps = 0;
        loop {
            for (a, &j) in active.iter().enumerate() {
                ab[a] = beta[j];
                ar[a] = resid[j];
            }
            loop {
                let mut max_d = 0.0_f64;
                for a in 0..active.len() {
                    let nb = soft(ar[a] + ab[a], lam);
                    let d = nb - ab[a];
                    if d != 0.0 {
                        ab[a] = nb;
                        for (r, g) in ar.iter_mut().zip(&acol[a]) {
                            *r -= d * g;
                        }
                        max_d = max_d.max(d * d);
                    }
                }
                sweeps += 1;
                if max_d < tol || sweeps > MAX_SWEEPS {
                    break;
                }
            }
            for (a, &j) in active.iter().enumerate() {
                beta[j] = ab[a];
            }
            resid.copy_from_slice(c);
            for &j in &active {
                if beta[j] != 0.0 {
                    let b = beta[j];
                    for (r, g) in resid.iter_mut().zip(gram.column(j).iter()) {
                        *r -= b * g;
                    }
                }
            }
            let mut added = false;
            for j in 0..q {
                if eligible[j] && !in_active[j] && resid[j].abs() > lam {
                    in_active[j] = true;
                    for (a, col) in acol.iter_mut().enumerate() {
                        col.push(gram[(j, active[a])]);
                    }
                    active.push(j);
                    let gj = gram.column(j);
                    acol.push(active.iter().map(|&i| gj[i]).collect());
                    ab.push(0.0);
                    ar.push(0.0);
                    added = true;
                }
            }
            if !added || sweeps > MAX_SWEEPS {
                break;
            }
        }
        visit(k, &beta, &active);

        if stop_rules {
            // RSS/n = Var(y) − β'c − β'resid for the standardized problem.
            let fit: f64 = active.iter().map(|&j| beta[j] * (c[j] + resid[j])).sum();
            let frac = (fit / var_y).clamp(0.0, 1.0);
            if frac > PATH_DEV_MAX || (k >= 4 && frac - prev_frac < PATH_FDEV * frac) {
                break;
            }
            prev_frac = frac;
        }
    }
}

/// Random row blocks of near-equal size.
pub fn random_blocks(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); k];
    for (pos, i) in perm.into_iter().enumerate() {
        out[pos % k].push(i);
    }
    for b in out.iter_mut() {
        b.sort_unstable();
    }
    out
}

/// Fit a cross-validated lasso on `x` (n×q) with `cv_folds` random row folds.
pub fn fit_lasso(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: &LambdaChoice,
    cv_folds: usize,
    seed: u64,
) -> Result<LassoModel> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Dimension("x and y row counts differ".into()));
    }
    if cv_folds < 2 || n < cv_folds {
        return Err(Error::InvalidArgument(format!(
            "lasso needs n ≥ cv_folds ≥ 2 (n = {n}, cv_folds = {cv_folds})"
        )));
    }
    let blocks = random_blocks(n, cv_folds, seed);
    let ws = LassoWorkspace::new(x, blocks);
    let all: Vec<usize> = (0..cv_folds).collect();
    let groups: Vec<Vec<usize>> = all.iter().map(|&b| vec![b]).collect();
    let prep = ws.prepare(&all, &groups);
    ws.fit(&prep, &ws.target(y), lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_matrix(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn full_shrinkage_predicts_mean() {
        let x = normal_matrix(50, 3, 1);
        let y: Vec<f64> = (0..50).map(|i| x[(i, 0)] + 2.0).collect();
        let m = fit_lasso(&x, &y, &LambdaChoice::Grid(vec![1e6]), 5, 0).unwrap();
        assert!(m.coef.is_empty());
        let mean = y.iter().sum::<f64>() / 50.0;
        for p in m.predict(&x) {
            assert!((p - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn orthonormal_design_soft_thresholds() {
        // Columns are orthogonal with zero mean and unit (1/n) variance.
        let n = 8;
        let h = [
            [1.0, 1.0, 1.0],
            [-1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0],
            [-1.0, -1.0, 1.0],
            [1.0, 1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [1.0, -1.0, -1.0],
            [-1.0, -1.0, -1.0],
        ];
        let x = DMatrix::from_fn(n, 3, |i, j| h[i][j]);
        let y = [3.0, -1.0, 0.5, 2.0, -0.3, 1.1, 0.9, -2.2];
        let ols: Vec<f64> = (0..3).map(|j| (0..n).map(|i| h[i][j] * y[i]).sum::<f64>() / n as f64).collect();
        for &lam in &[0.05, 0.2, 0.4] {
            let m = fit_lasso(&x, &y, &LambdaChoice::Grid(vec![lam]), 2, 0).unwrap();
            let b = m.dense_coef();
            for j in 0..3 {
                let oracle = ols[j].signum() * (ols[j].abs() - lam).max(0.0);
                assert!((b[j] - oracle).abs() < 1e-12, "λ={lam} j={j}: {} vs {oracle}", b[j]);
            }
        }
    }

    #[test]
    fn small_penalty_recovers_slope() {
        let n = 500;
        let x = normal_matrix(n, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x[(i, 0)] + 0.01 * { let e: f64 = StandardNormal.sample(&mut rng); e })
            .collect();
        let m = fit_lasso(&x, &y, &LambdaChoice::Grid(vec![1e-2, 1e-3, 1e-4]), 5, 0).unwrap();
        assert!((m.dense_coef()[0] - 2.0).abs() < 0.05);
        assert!(!m.cv_path.is_empty());
    }

    #[test]
    fn constant_target_and_constant_column() {
        let mut x = normal_matrix(40, 3, 4);
        x.column_mut(1).fill(7.0);
        let m = fit_lasso(&x, &[4.0; 40], &LambdaChoice::default(), 5, 0).unwrap();
        assert!(m.predict(&x).iter().all(|p| (p - 4.0).abs() < 1e-12));

        let y: Vec<f64> = (0..40).map(|i| x[(i, 0)] - x[(i, 2)]).collect();
        let m = fit_lasso(&x, &y, &LambdaChoice::default(), 5, 0).unwrap();
        assert_eq!(m.dense_coef()[1], 0.0);
    }

    #[test]
    fn column_rescaling_leaves_predictions_unchanged() {
        let n = 200;
        let x = normal_matrix(n, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<f64> = (0..n)
            .map(|i| x[(i, 0)] - 0.5 * x[(i, 3)] + { let e: f64 = StandardNormal.sample(&mut rng); e })
            .collect();
        let a = fit_lasso(&x, &y, &LambdaChoice::default(), 5, 9).unwrap();
        let mut xs = x.clone();
        xs.column_mut(3).scale_mut(37.0);
        let b = fit_lasso(&xs, &y, &LambdaChoice::default(), 5, 9).unwrap();
        assert!((a.lambda - b.lambda).abs() < 1e-9 * a.lambda);
        for (p, q) in a.predict(&x).iter().zip(b.predict(&xs)) {
            assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn moment_cv_error_matches_direct_prediction() {
        let n = 120;
        let x = normal_matrix(n, 4, 7);
        let y: Vec<f64> = (0..n).map(|i| x[(i, 1)] * 1.5 + x[(i, 2)].sin()).collect();
        let blocks = random_blocks(n, 3, 1);
        let ws = LassoWorkspace::new(&x, blocks.clone());
        let t = ws.target(&y);
        // Train on blocks 0,1; a single split holding out block 1.
        let prep = ws.prepare(&[0, 1], &[vec![0], vec![1]]);
        let m = ws.fit(&prep, &t, &LambdaChoice::Grid(vec![0.3, 0.1, 0.01])).unwrap();
        assert_eq!(m.cv_path.len(), 3);
        // Oracle: refit by hand on block 0 only and score block 1 directly.
        let rows0 = &blocks[0];
        let x0 = DMatrix::from_fn(rows0.len(), 4, |i, j| x[(rows0[i], j)]);
        let y0: Vec<f64> = rows0.iter().map(|&i| y[i]).collect();
        let ws0 = LassoWorkspace::new(&x0, vec![(0..rows0.len()).collect()]);
        let p0 = ws0.prepare(&[0], &[]);
        let m0 = ws0.fit(&p0, &ws0.target(&y0), &LambdaChoice::Grid(vec![0.1])).unwrap();
        let sse1: f64 = blocks[1]
            .iter()
            .map(|&i| {
                let row = DMatrix::from_fn(1, 4, |_, j| x[(i, j)]);
                (m0.predict(&row)[0] - y[i]).powi(2)
            })
            .sum();
        // Same for the other split.
        let rows1 = &blocks[1];
        let x1 = DMatrix::from_fn(rows1.len(), 4, |i, j| x[(rows1[i], j)]);
        let y1: Vec<f64> = rows1.iter().map(|&i| y[i]).collect();
        let ws1 = LassoWorkspace::new(&x1, vec![(0..rows1.len()).collect()]);
        let p1 = ws1.prepare(&[0], &[]);
        let m1 = ws1.fit(&p1, &ws1.target(&y1), &LambdaChoice::Grid(vec![0.1])).unwrap();
        let sse0: f64 = blocks[0]
            .iter()
            .map(|&i| {
                let row = DMatrix::from_fn(1, 4, |_, j| x[(i, j)]);
                (m1.predict(&row)[0] - y[i]).powi(2)
            })
            .sum();
        let expected = (sse0 + sse1) / (blocks[0].len() + blocks[1].len()) as f64;
        assert!((m.cv_path[1].1 - expected).abs() < 1e-6 * expected, "{} vs {expected}", m.cv_path[1].1);
    }
}
