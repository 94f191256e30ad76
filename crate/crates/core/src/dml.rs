//! Cross-fitted orthogonal estimation of the structural coefficient `θ`,
//! the first stage `π` and the reduced form `δ`.
//!
//! With residuals `ey = Ỹ − l̂`, `ed = D̃ − r̂` and `V = Z̃ − M̂` on the rows of
//! fold `k`:
//!
//! ```text
//! π_k = (V'V)⁻¹V'ed      δ_k = (V'V)⁻¹V'ey
//! θ_k = (Vπ_k)'ey / (Vπ_k)'ed
//! ```
//!
//! Fold estimates are averaged; variances combine per-fold cluster-robust
//! sandwiches with the dispersion of the fold estimates around their mean.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::learners::lasso::LassoWorkspace;
use crate::learners::tuning::grid_search_tune;
use crate::learners::{LassoSpec, LearnerKind, LearnerSpec};
use crate::linalg::{mean, sample_sd, select, select_rows, spd_inverse};
use crate::panel::{block_kfold, DifferencedSample, FoldAssignment};
use crate::weak_iv::{ArVariance, IvInference};
use crate::{derive_seed, Error, Result};

/// Candidates per hyperparameter and evaluations when a learner is tuned.
pub const TUNE_CANDIDATES: usize = 5;
pub const TUNE_EVALUATIONS: usize = 5;
pub const TUNE_CV_FOLDS: usize = 5;

/// Relative size of `|V̂⊥'(D̃ − r̂)|/n` below which the denominator counts as weak.
pub const WEAK_DENOMINATOR_RTOL: f64 = 1e-10;

/// Learners for the three nuisance regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceLearners {
    /// `E[Ỹ | X]`.
    pub l: LearnerSpec,
    /// `E[D̃ | X]`.
    pub r: LearnerSpec,
    /// `E[Z̃ | X]`, one fit per instrument.
    pub m: LearnerSpec,
}

impl NuisanceLearners {
    pub fn same(spec: LearnerSpec) -> Self {
        NuisanceLearners {
            l: spec.clone(),
            r: spec.clone(),
            m: spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.l.validate()?;
        self.r.validate()?;
        self.m.validate()
    }

    /// Short label such as `lasso` or `boosting/lasso/lasso`.
    pub fn label(&self) -> String {
        let (a, b, c) = (self.l.kind.name(), self.r.kind.name(), self.m.kind.name());
        if a == b && b == c {
            a.to_string()
        } else {
            format!("{a}/{b}/{c}")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmlConfig {
    pub folds: usize,
    pub seed: u64,
    pub learners: NuisanceLearners,
}

/// A hyperparameter choice made by tuning inside one cross-fitting fold.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedChoice {
    pub fold: usize,
    pub target: String,
    pub spec: LearnerSpec,
    pub cv_mse: f64,
}

/// Out-of-fold nuisance predictions aligned with the differenced rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisancePredictions {
    pub lhat: Vec<f64>,
    pub rhat: Vec<f64>,
    /// n × r.
    pub mhat: DMatrix<f64>,
    pub mse_l: f64,
    pub mse_r: f64,
    /// One per instrument.
    pub mse_m: Vec<f64>,
    pub tuned: Vec<TunedChoice>,
}

impl NuisancePredictions {
    /// Build from raw predictions, computing out-of-sample MSEs.
    pub fn new(fd: &DifferencedSample, lhat: Vec<f64>, rhat: Vec<f64>, mhat: DMatrix<f64>) -> Result<Self> {
        let n = fd.n_rows();
        if lhat.len() != n || rhat.len() != n || mhat.nrows() != n || mhat.ncols() != fd.n_instruments() {
            return Err(Error::Dimension("nuisance predictions do not match the differenced sample".into()));
        }
        if lhat.iter().chain(&rhat).chain(mhat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence);
        }
        let mse_m = (0..mhat.ncols())
            .map(|j| {
                let zc: Vec<f64> = fd.ztilde.column(j).iter().cloned().collect();
                let mc: Vec<f64> = mhat.column(j).iter().cloned().collect();
                crate::linalg::mse(&zc, &mc)
            })
            .collect();
        Ok(NuisancePredictions {
            mse_l: crate::linalg::mse(&fd.ytilde, &lhat),
            mse_r: crate::linalg::mse(&fd.dtilde, &rhat),
            mse_m,
            lhat,
            rhat,
            mhat,
            tuned: Vec::new(),
        })
    }

    /// `η̂ + eps·h`.
    pub fn perturbed(&self, h: &NuisanceDirection, eps: f64) -> NuisancePredictions {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + eps * y).collect::<Vec<f64>>();
        NuisancePredictions {
            lhat: add(&self.lhat, &h.l),
            rhat: add(&self.rhat, &h.r),
            mhat: &self.mhat + &h.m * eps,
            ..self.clone()
        }
    }
}

/// Residuals entering the orthogonal score.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    /// `Ỹ − l̂`.
    pub ey: Vec<f64>,
    /// `D̃ − r̂`.
    pub ed: Vec<f64>,
    /// `Z̃ − M̂`, n × r.
    pub v: DMatrix<f64>,
}

impl Residuals {
    pub fn new(fd: &DifferencedSample, nuis: &NuisancePredictions) -> Residuals {
        Residuals {
            ey: fd.ytilde.iter().zip(&nuis.lhat).map(|(a, b)| a - b).collect(),
            ed: fd.dtilde.iter().zip(&nuis.rhat).map(|(a, b)| a - b).collect(),
            v: &fd.ztilde - &nuis.mhat,
        }
    }

    pub fn rows(&self, idx: &[usize]) -> Residuals {
        Residuals {
            ey: select(&self.ey, idx),
            ed: select(&self.ed, idx),
            v: select_rows(&self.v, idx),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.ey.len()
    }
}

/// Estimates and finite-sample variances from one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldEstimate {
    pub n_rows: usize,
    pub n_units: usize,
    pub theta: f64,
    pub pi: DVector<f64>,
    pub delta: DVector<f64>,
    pub weak_denominator: bool,
    /// `V̂⊥'(D̃ − r̂)`.
    pub denominator: f64,
    pub var_theta: f64,
    pub var_pi: DMatrix<f64>,
    pub var_delta: DMatrix<f64>,
    /// Blocks of the null-imposed reduced-form variance.
    pub ar_yy: DMatrix<f64>,
    pub ar_yd: DMatrix<f64>,
    pub ar_dd: DMatrix<f64>,
}

struct PointFold {
    q_inv: DMatrix<f64>,
    pi: DVector<f64>,
    delta: DVector<f64>,
    vperp: DVector<f64>,
    numerator: f64,
    denominator: f64,
}

fn point_fold(res: &Residuals) -> Result<PointFold> {
    let v = &res.v;
    let ey = DVector::from_column_slice(&res.ey);
    let ed = DVector::from_column_slice(&res.ed);
    let q = v.transpose() * v;
    let q_inv = spd_inverse(&q, "instrument residual cross-product").map_err(|_| Error::DegenerateInstrument { fold: None })?;
    let pi = &q_inv * (v.transpose() * &ed);
    let delta = &q_inv * (v.transpose() * &ey);
    let vperp = v * &pi;
    let numerator = vperp.dot(&ey);
    let denominator = vperp.dot(&ed);
    Ok(PointFold {
        q_inv,
        pi,
        delta,
        vperp,
        numerator,
        denominator,
    })
}

/// Cluster sums of per-row scores: `n_clusters × ncols`.
fn cluster_sums(scores: &DMatrix<f64>, cluster: &[usize], n_clusters: usize) -> DMatrix<f64> {
    let mut sums = DMatrix::<f64>::zeros(n_clusters, scores.ncols());
    for (i, &c) in cluster.iter().enumerate() {
        for j in 0..scores.ncols() {
            sums[(c, j)] += scores[(i, j)];
        }
    }
    sums
}

/// Scale each row of `v` by `w`.
fn row_scaled(v: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * w[i])
}

/// Solve the orthogonal moment on one fold and compute its sandwich variances.
///
/// `cluster` holds dense cluster indices below `n_clusters` for the fold rows;
/// `d_scale` is the scale used by the weak-denominator test.
pub fn estimate_fold(
    res: &Residuals,
    cluster: &[usize],
    n_clusters: usize,
    n_units: usize,
    d_scale: f64,
) -> Result<FoldEstimate> {
    let n = res.n_rows();
    if cluster.len() != n {
        return Err(Error::Dimension("cluster ids do not match fold rows".into()));
    }
    let p = point_fold(res)?;
    let theta = p.numerator / p.denominator;
    let weak_denominator = !(p.denominator.abs() / n as f64 >= WEAK_DENOMINATOR_RTOL * d_scale);

    let u: Vec<f64> = res.ey.iter().zip(&res.ed).map(|(y, d)| y - d * theta).collect();
    let theta_scores = DMatrix::from_fn(n, 1, |i, _| p.vperp[i] * u[i]);
    let st = cluster_sums(&theta_scores, cluster, n_clusters);
    let var_theta = st.norm_squared() / (p.denominator * p.denominator);

    let fitted_d = &res.v * &p.pi;
    let fitted_y = &res.v * &p.delta;
    let ed_res: Vec<f64> = (0..n).map(|i| res.ed[i] - fitted_d[i]).collect();
    let ey_res: Vec<f64> = (0..n).map(|i| res.ey[i] - fitted_y[i]).collect();
    let sp = cluster_sums(&row_scaled(&res.v, &ed_res), cluster, n_clusters);
    let sd = cluster_sums(&row_scaled(&res.v, &ey_res), cluster, n_clusters);
    let var_pi = &p.q_inv * (sp.transpose() * &sp) * &p.q_inv;
    let var_delta = &p.q_inv * (sd.transpose() * &sd) * &p.q_inv;

    let gy = cluster_sums(&row_scaled(&res.v, &res.ey), cluster, n_clusters);
    let gd = cluster_sums(&row_scaled(&res.v, &res.ed), cluster, n_clusters);
    let ar_yy = &p.q_inv * (gy.transpose() * &gy) * &p.q_inv;
    let ar_yd = &p.q_inv * (gy.transpose() * &gd) * &p.q_inv;
    let ar_dd = &p.q_inv * (gd.transpose() * &gd) * &p.q_inv;

    Ok(FoldEstimate {
        n_rows: n,
        n_units,
        theta,
        pi: p.pi,
        delta: p.delta,
        weak_denominator,
        denominator: p.denominator,
        var_theta,
        var_pi: symmetrize(var_pi),
        var_delta: symmetrize(var_delta),
        ar_yy: symmetrize(ar_yy),
        ar_yd,
        ar_dd: symmetrize(ar_dd),
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Fold-averaged estimates with their combined variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub theta: f64,
    pub pi: DVector<f64>,
    pub delta: DVector<f64>,
    pub sigma_theta: f64,
    pub sigma_pi: DMatrix<f64>,
    pub sigma_delta: DMatrix<f64>,
    pub ar_variance: ArVariance,
}

/// Average fold estimates.
///
/// With `w_k = N_k/N`, each variance is
/// `Σ_k w_k [N_k·V_k + (b_k − b̄)(b_k − b̄)'] / N`, where `V_k` is the fold
/// sandwich and `N_k` its unit count.
pub fn aggregate(folds: &[FoldEstimate]) -> Result<Aggregate> {
    if folds.is_empty() {
        return Err(Error::InvalidArgument("no fold estimates to aggregate".into()));
    }
    let r = folds[0].pi.len();
    let k = folds.len() as f64;
    let n_total: usize = folds.iter().map(|f| f.n_units).sum();
    let n = n_total as f64;
    let theta = folds.iter().map(|f| f.theta).sum::<f64>() / k;
    let pi = folds.iter().fold(DVector::zeros(r), |a, f| a + &f.pi) / k;
    let delta = folds.iter().fold(DVector::zeros(r), |a, f| a + &f.delta) / k;

    let mut s_theta = 0.0;
    let mut s_pi = DMatrix::zeros(r, r);
    let mut s_delta = DMatrix::zeros(r, r);
    let mut yy = DMatrix::zeros(r, r);
    let mut yd = DMatrix::zeros(r, r);
    let mut dd = DMatrix::zeros(r, r);
    for f in folds {
        let nk = f.n_units as f64;
        let w = nk / n;
        let dt = f.theta - theta;
        let dp = &f.pi - &pi;
        let dl = &f.delta - &delta;
        s_theta += w * (nk * f.var_theta + dt * dt);
        s_pi += (&f.var_pi * nk + &dp * dp.transpose()) * w;
        s_delta += (&f.var_delta * nk + &dl * dl.transpose()) * w;
        yy += (&f.ar_yy * nk + &dl * dl.transpose()) * w;
        yd += (&f.ar_yd * nk + &dl * dp.transpose()) * w;
        dd += (&f.ar_dd * nk + &dp * dp.transpose()) * w;
    }
    Ok(Aggregate {
        theta,
        pi,
        delta,
        sigma_theta: s_theta / n,
        sigma_pi: s_pi / n,
        sigma_delta: s_delta / n,
        ar_variance: ArVariance::NullImposed {
            yy: yy / n,
            yd: yd / n,
            dd: dd / n,
        },
    })
}

/// Cross-fitted estimate with inference inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlEstimate {
    pub theta: f64,
    pub pi: DVector<f64>,
    pub delta: DVector<f64>,
    /// Variance of `θ̂`.
    pub sigma_theta: f64,
    pub sigma_pi: DMatrix<f64>,
    pub sigma_delta: DMatrix<f64>,
    pub ar_variance: ArVariance,
    pub folds: Vec<FoldEstimate>,
    pub k: usize,
    pub n_units: usize,
    pub n_rows: usize,
    pub n_clusters: usize,
    /// `√mean((Ỹ − l̂ − (D̃ − r̂)θ̂)²)`.
    pub model_rmse: f64,
    pub mse_l: f64,
    pub mse_r: f64,
    pub mse_m: Vec<f64>,
    pub weak_denominator: bool,
    pub z_names: Vec<String>,
    pub learner: String,
    pub tuned: Vec<TunedChoice>,
}

impl DmlEstimate {
    pub fn se_theta(&self) -> f64 {
        self.sigma_theta.max(0.0).sqrt()
    }
}

impl IvInference for DmlEstimate {
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

/// Per-row dense cluster ids restricted to `rows`, with their count.
pub(crate) fn fold_clusters(fd: &DifferencedSample, rows: &[usize]) -> (Vec<usize>, usize) {
    crate::linalg::dense_ids(&select(&fd.cluster, rows))
}

pub(crate) fn fold_units(fd: &DifferencedSample, rows: &[usize]) -> usize {
    let mut u: Vec<usize> = select(&fd.unit, rows);
    u.sort_unstable();
    u.dedup();
    u.len()
}

pub(crate) fn d_scale(fd: &DifferencedSample) -> f64 {
    let s = sample_sd(&fd.dtilde);
    if s.is_finite() {
        s
    } else {
        0.0
    }
}

/// Solve every fold and aggregate, given out-of-fold nuisances.
pub fn estimate_from_nuisances(
    fd: &DifferencedSample,
    folds: &FoldAssignment,
    nuis: &NuisancePredictions,
    learner: &str,
) -> Result<DmlEstimate> {
    let res = Residuals::new(fd, nuis);
    let scale = d_scale(fd);
    let fold_rows = folds.rows(fd);
    let estimates = fold_rows
        .iter()
        .enumerate()
        .map(|(k, rows)| {
            if rows.is_empty() {
                return Err(Error::InvalidArgument(format!("fold {} has no rows", k + 1)));
            }
            let (cl, nc) = fold_clusters(fd, rows);
            estimate_fold(&res.rows(rows), &cl, nc, fold_units(fd, rows), scale).map_err(|e| e.in_fold(k + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = aggregate(&estimates)?;
    let sse: f64 = (0..fd.n_rows())
        .map(|i| (res.ey[i] - res.ed[i] * agg.theta).powi(2))
        .sum();
    Ok(DmlEstimate {
        theta: agg.theta,
        pi: agg.pi,
        delta: agg.delta,
        sigma_theta: agg.sigma_theta,
        sigma_pi: agg.sigma_pi,
        sigma_delta: agg.sigma_delta,
        ar_variance: agg.ar_variance,
        weak_denominator: estimates.iter().any(|f| f.weak_denominator),
        folds: estimates,
        k: folds.k,
        n_units: fd.n_units(),
        n_rows: fd.n_rows(),
        n_clusters: fd.n_clusters(),
        model_rmse: (sse / fd.n_rows() as f64).sqrt(),
        mse_l: nuis.mse_l,
        mse_r: nuis.mse_r,
        mse_m: nuis.mse_m.clone(),
        z_names: fd.z_names.clone(),
        learner: learner.to_string(),
        tuned: nuis.tuned.clone(),
    })
}

/// Full pipeline: fold assignment, nuisance learning, estimation.
pub fn estimate_dml(fd: &DifferencedSample, cfg: &DmlConfig) -> Result<DmlEstimate> {
    cfg.learners.validate()?;
    let folds = block_kfold(fd.n_units(), cfg.folds, cfg.seed)?;
    let nuis = learn_nuisances(fd, &folds, &cfg.learners, cfg.seed)?;
    estimate_from_nuisances(fd, &folds, &nuis, &cfg.learners.label())
}

/// Fold-averaged `θ̂` only.
pub fn point_theta(fd: &DifferencedSample, folds: &FoldAssignment, nuis: &NuisancePredictions) -> Result<f64> {
    let res = Residuals::new(fd, nuis);
    let fold_rows = folds.rows(fd);
    let mut acc = 0.0;
    for rows in &fold_rows {
        let p = point_fold(&res.rows(rows))?;
        acc += p.numerator / p.denominator;
    }
    Ok(acc / fold_rows.len() as f64)
}

/// A per-row perturbation of `(l̂, r̂, M̂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceDirection {
    pub l: Vec<f64>,
    pub r: Vec<f64>,
    pub m: DMatrix<f64>,
}

/// `θ̂(η̂ + eps·h) − θ̂(η̂)`.
pub fn orthogonality_probe(
    fd: &DifferencedSample,
    folds: &FoldAssignment,
    nuis: &NuisancePredictions,
    direction: &NuisanceDirection,
    eps: f64,
) -> Result<f64> {
    let base = point_theta(fd, folds, nuis)?;
    if eps == 0.0 {
        return Ok(0.0);
    }
    Ok(point_theta(fd, folds, &nuis.perturbed(direction, eps))? - base)
}

/// Residual of `h` after least-squares projection on the columns of `basis`.
fn project_out(basis: &DMatrix<f64>, h: &DVector<f64>) -> DVector<f64> {
    if basis.ncols() == 0 {
        return h.clone();
    }
    let svd = basis.clone().svd(true, true);
    match svd.solve(h, 1e-12) {
        Ok(c) => h - basis * c,
        Err(_) => h.clone(),
    }
}

/// Remove from a direction, fold by fold, the components that move the
/// sample score at first order: `h_l`, `h_r` orthogonal to `V̂`, and each
/// column of `h_m` orthogonal to `V̂`, `Ỹ − l̂` and `D̃ − r̂`. Along the
/// result `θ̂` changes only at second order in the step size.
pub fn orthogonalize_direction(
    fd: &DifferencedSample,
    folds: &FoldAssignment,
    nuis: &NuisancePredictions,
    raw: &NuisanceDirection,
) -> NuisanceDirection {
    let res = Residuals::new(fd, nuis);
    let r = fd.n_instruments();
    let mut out = raw.clone();
    for rows in folds.rows(fd) {
        let rk = res.rows(&rows);
        let v = rk.v.clone();
        let mut vye = DMatrix::zeros(rows.len(), r + 2);
        vye.view_mut((0, 0), (rows.len(), r)).copy_from(&v);
        for (i, _) in rows.iter().enumerate() {
            vye[(i, r)] = rk.ey[i];
            vye[(i, r + 1)] = rk.ed[i];
        }
        let pl = project_out(&v, &DVector::from_iterator(rows.len(), rows.iter().map(|&i| raw.l[i])));
        let pr = project_out(&v, &DVector::from_iterator(rows.len(), rows.iter().map(|&i| raw.r[i])));
        for (a, &i) in rows.iter().enumerate() {
            out.l[i] = pl[a];
            out.r[i] = pr[a];
        }
        for j in 0..r {
            let pm = project_out(&vye, &DVector::from_iterator(rows.len(), rows.iter().map(|&i| raw.m[(i, j)])));
            for (a, &i) in rows.iter().enumerate() {
                out.m[(i, j)] = pm[a];
            }
        }
    }
    out
}

const TARGET_L: usize = 0;
const TARGET_R: usize = 1;

fn target_name(fd: &DifferencedSample, t: usize) -> String {
    match t {
        TARGET_L => "l".into(),
        TARGET_R => "r".into(),
        j => format!("m:{}", fd.z_names.get(j - 2).cloned().unwrap_or_else(|| format!("z{}", j - 1))),
    }
}

fn target_values(fd: &DifferencedSample, t: usize) -> Vec<f64> {
    match t {
        TARGET_L => fd.ytilde.clone(),
        TARGET_R => fd.dtilde.clone(),
        j => fd.ztilde.column(j - 2).iter().cloned().collect(),
    }
}

fn spec_for(learners: &NuisanceLearners, t: usize) -> &LearnerSpec {
    match t {
        TARGET_L => &learners.l,
        TARGET_R => &learners.r,
        _ => &learners.m,
    }
}

/// Predictions for one fold and every target, plus any tuning choices.
type FoldFit = (Vec<Vec<f64>>, Vec<TunedChoice>);

/// Cross-fit the nuisance regressions: for each fold, fit on the other
/// folds' units and predict on the fold.
pub fn learn_nuisances(
    fd: &DifferencedSample,
    folds: &FoldAssignment,
    learners: &NuisanceLearners,
    seed: u64,
) -> Result<NuisancePredictions> {
    if folds.fold_of_unit.len() != fd.n_units() {
        return Err(Error::Dimension("fold assignment does not match the sample's units".into()));
    }
    let fold_rows = folds.rows(fd);
    for k in 0..folds.k {
        if fold_rows.iter().enumerate().all(|(j, rows)| j == k || rows.is_empty()) {
            return Err(Error::InvalidArgument(format!("training sample for fold {} is empty", k + 1)));
        }
    }
    let n_targets = 2 + fd.n_instruments();

    let per_fold: Vec<FoldFit> = if let Some(specs) = shared_lasso(learners) {
        lasso_cross_fit(fd, folds, &fold_rows, specs, seed)?
    } else {
        (0..folds.k)
            .into_par_iter()
            .map(|k| {
                let train = folds.complement_rows(fd, k);
                let xtr = select_rows(&fd.xpair, &train);
                let xte = select_rows(&fd.xpair, &fold_rows[k]);
                let mut preds = Vec::with_capacity(n_targets);
                let mut tuned = Vec::new();
                for t in 0..n_targets {
                    let spec = spec_for(learners, t);
                    let y = select(&target_values(fd, t), &train);
                    let fit_seed = derive_seed(seed.wrapping_add(spec.seed), k as u64, t as u64);
                    let chosen = if spec.tune && matches!(spec.kind, LearnerKind::Boosting(_) | LearnerKind::Mlp(_)) {
                        let folds_cv = TUNE_CV_FOLDS.min(train.len());
                        let res = grid_search_tune(spec, &xtr, &y, TUNE_CANDIDATES, TUNE_EVALUATIONS, folds_cv, fit_seed)
                            .map_err(|e| e.in_fold(k + 1))?;
                        tuned.push(TunedChoice {
                            fold: k + 1,
                            target: target_name(fd, t),
                            spec: res.best.clone(),
                            cv_mse: res.best_cv_mse,
                        });
                        res.best
                    } else {
                        spec.clone()
                    };
                    let model = chosen.fit_seeded(&xtr, &y, fit_seed).map_err(|e| e.in_fold(k + 1))?;
                    preds.push(model.predict(&xte)?);
                }
                Ok((preds, tuned))
            })
            .collect::<Result<Vec<_>>>()?
    };

    let n = fd.n_rows();
    let r = fd.n_instruments();
    let mut lhat = vec![0.0; n];
    let mut rhat = vec![0.0; n];
    let mut mhat = DMatrix::zeros(n, r);
    let mut tuned = Vec::new();
    for (k, (preds, t)) in per_fold.into_iter().enumerate() {
        for (a, &i) in fold_rows[k].iter().enumerate() {
            lhat[i] = preds[TARGET_L][a];
            rhat[i] = preds[TARGET_R][a];
            for j in 0..r {
                mhat[(i, j)] = preds[2 + j][a];
            }
        }
        tuned.extend(t);
    }
    let mut out = NuisancePredictions::new(fd, lhat, rhat, mhat)?;
    out.tuned = tuned;
    Ok(out)
}

/// The three lasso specs when every nuisance uses the lasso with the same
/// dictionary and inner fold count.
fn shared_lasso(learners: &NuisanceLearners) -> Option<[&LassoSpec; 3]> {
    match (&learners.l.kind, &learners.r.kind, &learners.m.kind) {
        (LearnerKind::Lasso(a), LearnerKind::Lasso(b), LearnerKind::Lasso(c))
            if a.dictionary == b.dictionary && b.dictionary == c.dictionary && a.nfolds == b.nfolds && b.nfolds == c.nfolds =>
        {
            Some([a, b, c])
        }
        _ => None,
    }
}

/// Lasso cross-fitting from one set of block moments.
///
/// Units of each outer fold are dealt into `nfolds` inner groups; block
/// `(k, g)` holds the rows of those units. Training for fold `k` uses all
/// blocks outside `k`, and its penalty is cross-validated by holding out the
/// inner group `g` across those blocks, so validation is unit-level.
fn lasso_cross_fit(
    fd: &DifferencedSample,
    folds: &FoldAssignment,
    fold_rows: &[Vec<usize>],
    specs: [&LassoSpec; 3],
    seed: u64,
) -> Result<Vec<FoldFit>> {
    let nf = specs[0].nfolds;
    let k_out = folds.k;
    let sizes = folds.sizes();
    for k in 0..k_out {
        let train_units: usize = sizes.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, s)| s).sum();
        if train_units < nf {
            return Err(Error::InvalidArgument(format!(
                "fold {} trains on {train_units} units, fewer than the {nf} lasso CV folds",
                k + 1
            )));
        }
    }
    let xd = specs[0].dictionary.expand(&fd.xpair)?;

    let mut group_of_unit = vec![0usize; fd.n_units()];
    for k in 0..k_out {
        let mut units: Vec<usize> = (0..fd.n_units()).filter(|&u| folds.fold_of_unit[u] == k).collect();
        units.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64, 0x1a55)));
        for (pos, u) in units.into_iter().enumerate() {
            group_of_unit[u] = pos % nf;
        }
    }
    let mut block_rows = vec![Vec::new(); k_out * nf];
    for i in 0..fd.n_rows() {
        let u = fd.unit[i];
        block_rows[folds.fold_of_unit[u] * nf + group_of_unit[u]].push(i);
    }
    let ws = LassoWorkspace::new(&xd, block_rows);
    let n_targets = 2 + fd.n_instruments();
    let targets: Vec<_> = (0..n_targets).map(|t| ws.target(&target_values(fd, t))).collect();
    let choices: Vec<_> = (0..n_targets)
        .map(|t| specs[t.min(2)].lambda_choice())
        .collect();

    (0..k_out)
        .into_par_iter()
        .map(|k| {
            let train: Vec<usize> = (0..k_out * nf).filter(|b| b / nf != k).collect();
            let groups: Vec<Vec<usize>> = (0..nf)
                .map(|g| (0..k_out).filter(|&j| j != k).map(|j| j * nf + g).collect())
                .collect();
            let prep = ws.prepare(&train, &groups);
            let preds = (0..n_targets)
                .map(|t| {
                    let model = ws.fit(&prep, &targets[t], &choices[t]).map_err(|e| e.in_fold(k + 1))?;
                    Ok(model.predict_rows(&xd, &fold_rows[k]))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((preds, Vec::new()))
        })
        .collect::<Result<Vec<_>>>()
}

/// Mean of fold estimates of `θ`, for diagnostics.
pub fn fold_theta_mean(est: &DmlEstimate) -> f64 {
    mean(&est.folds.iter().map(|f| f.theta).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{first_difference, PanelDataset, PanelParts};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn res1(ey: &[f64], ed: &[f64], z: &[f64]) -> Residuals {
        Residuals {
            ey: ey.to_vec(),
            ed: ed.to_vec(),
            v: DMatrix::from_column_slice(z.len(), 1, z),
        }
    }

    fn ids(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn four_row_hand_example() {
        let ey = [1.0, -2.0, 0.5, 3.0];
        let ed = [2.0, 1.0, -1.0, 0.0];
        let v = [1.0, -1.0, 2.0, 0.5];
        let f = estimate_fold(&res1(&ey, &ed, &v), &ids(4), 4, 4, 1.0).unwrap();
        let vv: f64 = v.iter().map(|a| a * a).sum();
        let vd: f64 = v.iter().zip(&ed).map(|(a, b)| a * b).sum();
        let vy: f64 = v.iter().zip(&ey).map(|(a, b)| a * b).sum();
        assert_relative_eq!(f.pi[0], vd / vv, epsilon = 1e-14);
        assert_relative_eq!(f.delta[0], vy / vv, epsilon = 1e-14);
        assert_relative_eq!(f.theta, vy / vd, epsilon = 1e-14);
        assert_relative_eq!(f.delta[0], f.pi[0] * f.theta, epsilon = 1e-14);
        // Robust variance of θ with each row its own cluster.
        let hc: f64 = (0..4)
            .map(|i| {
                let s = (vd / vv) * v[i] * (ey[i] - ed[i] * vy / vd);
                s * s
            })
            .sum::<f64>()
            / (vd / vv * vd).powi(2);
        assert_relative_eq!(f.var_theta, hc, epsilon = 1e-12);
    }

    #[test]
    fn exact_recovery_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let ed: Vec<f64> = v.iter().map(|x| 0.8 * x).collect();
        let ey: Vec<f64> = ed.iter().map(|x| 0.5 * x).collect();
        let f = estimate_fold(&res1(&ey, &ed, &v), &ids(n), n, n, 1.0).unwrap();
        assert_relative_eq!(f.theta, 0.5, epsilon = 1e-14);
        assert_relative_eq!(f.pi[0], 0.8, epsilon = 1e-14);
    }

    #[test]
    fn scaling_outcome_residual_scales_theta_and_delta() {
        let ey = [1.0, -2.0, 0.5, 3.0, 0.2];
        let ed = [2.0, 1.0, -1.0, 0.0, 0.7];
        let v = [1.0, -1.0, 2.0, 0.5, -0.3];
        let a = estimate_fold(&res1(&ey, &ed, &v), &ids(5), 5, 5, 1.0).unwrap();
        let ey2: Vec<f64> = ey.iter().map(|x| 2.0 * x).collect();
        let b = estimate_fold(&res1(&ey2, &ed, &v), &ids(5), 5, 5, 1.0).unwrap();
        assert_relative_eq!(b.theta, 2.0 * a.theta, epsilon = 1e-13);
        assert_relative_eq!(b.delta[0], 2.0 * a.delta[0], epsilon = 1e-13);
        assert_eq!(a.pi, b.pi);
    }

    #[test]
    fn zero_instrument_variation_is_degenerate() {
        let e = estimate_fold(&res1(&[1.0, 2.0], &[1.0, 0.0], &[0.0, 0.0]), &ids(2), 2, 2, 1.0).unwrap_err();
        assert!(matches!(e, Error::DegenerateInstrument { .. }));
    }

    #[test]
    fn orthogonal_first_stage_flags_weak_denominator() {
        let f = estimate_fold(&res1(&[1.0, 2.0, 0.0], &[1.0, 1.0, 0.0], &[1.0, -1.0, 0.0]), &ids(3), 3, 3, 1.0).unwrap();
        assert!(f.weak_denominator);
    }

    #[test]
    fn moment_conditions_hold_with_two_instruments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 80;
        let v = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ed: Vec<f64> = (0..n).map(|i| v[(i, 0)] - 0.4 * v[(i, 1)] + rng.sample::<f64, _>(StandardNormal)).collect();
        let ey: Vec<f64> = (0..n).map(|i| 0.7 * ed[i] + rng.sample::<f64, _>(StandardNormal)).collect();
        let res = Residuals { ey: ey.clone(), ed: ed.clone(), v: v.clone() };
        let clusters: Vec<usize> = (0..n).map(|i| i / 4).collect();
        let f = estimate_fold(&res, &clusters, 20, 20, 1.0).unwrap();
        let vperp = &v * &f.pi;
        let m1: f64 = (0..n).map(|i| vperp[i] * (ey[i] - ed[i] * f.theta)).sum();
        assert!(m1.abs() < 1e-10);
        let edv = DVector::from_vec(ed.clone());
        let m2 = v.transpose() * (&edv - &v * &f.pi);
        assert!(m2.amax() < 1e-10);
        // Null-imposed AR variance at θ0 equals the sandwich of V·(ey − θ0·ed).
        let t0 = 0.3;
        let agg = aggregate(&[f.clone(), f.clone()]).unwrap();
        let q_inv = (v.transpose() * &v).try_inverse().unwrap();
        let mut g = DMatrix::<f64>::zeros(20, 2);
        for i in 0..n {
            for j in 0..2 {
                g[(clusters[i], j)] += v[(i, j)] * (ey[i] - t0 * ed[i]);
            }
        }
        let direct = &q_inv * g.transpose() * &g * &q_inv;
        // Two identical folds of 20 units: aggregate equals the single-fold sandwich / 2.
        let got = agg.ar_variance.at(t0) * 2.0;
        assert!((got - direct).amax() < 1e-12);
    }

    fn fold(theta: f64, var: f64, units: usize) -> FoldEstimate {
        let one = DMatrix::from_element(1, 1, var);
        FoldEstimate {
            n_rows: units,
            n_units: units,
            theta,
            pi: DVector::from_element(1, 1.0),
            delta: DVector::from_element(1, theta),
            weak_denominator: false,
            denominator: 1.0,
            var_theta: var,
            var_pi: one.clone(),
            var_delta: one.clone(),
            ar_yy: one.clone(),
            ar_yd: one.clone() * 0.0,
            ar_dd: one,
        }
    }

    #[test]
    fn identical_folds_have_no_correction() {
        let a = aggregate(&[fold(0.4, 0.02, 10), fold(0.4, 0.02, 10)]).unwrap();
        assert_eq!(a.theta, 0.4);
        // Σ w_k N_k V_k / N = 0.02·10/20.
        assert_relative_eq!(a.sigma_theta, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn dispersion_correction_arithmetic() {
        let a = aggregate(&[fold(1.0, 0.0, 10), fold(3.0, 0.0, 10)]).unwrap();
        assert_eq!(a.theta, 2.0);
        // (0.5·(1−2)² + 0.5·(3−2)²) / 20.
        assert_relative_eq!(a.sigma_theta, 1.0 / 20.0, epsilon = 1e-15);
    }

    fn toy_sample(n_units: usize, t: usize, seed: u64) -> DifferencedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parts = PanelParts {
            z_names: vec!["z".into()],
            x_names: vec!["x1".into(), "x2".into()],
            ..Default::default()
        };
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        let mut z = Vec::new();
        for u in 0..n_units {
            let fe: f64 = rng.sample(StandardNormal);
            for s in 0..t {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                let zz = a + rng.sample::<f64, _>(StandardNormal);
                let d = 0.8 * zz + b + rng.sample::<f64, _>(StandardNormal) + fe;
                parts.unit.push(format!("u{u}"));
                parts.time.push(s as i64);
                parts.d.push(d);
                parts.y.push(0.5 * d + a - b + fe + rng.sample::<f64, _>(StandardNormal));
                x1.push(a);
                x2.push(b);
                z.push(zz);
            }
        }
        parts.z = vec![z];
        parts.x = vec![x1, x2];
        first_difference(&PanelDataset::new(parts).unwrap()).unwrap()
    }

    #[test]
    fn cross_fitting_never_trains_on_own_unit() {
        let fd = toy_sample(12, 4, 2);
        let folds = block_kfold(fd.n_units(), 3, 7).unwrap();
        for k in 0..3 {
            let train = folds.complement_rows(&fd, k);
            for rows in folds.rows(&fd)[k].iter() {
                assert!(!train.iter().any(|&i| fd.unit[i] == fd.unit[*rows]));
            }
        }
        let cfg = DmlConfig {
            folds: 3,
            seed: 7,
            learners: NuisanceLearners::same(LearnerSpec::linear()),
        };
        let est = estimate_dml(&fd, &cfg).unwrap();
        assert!((est.theta - 0.5).abs() < 0.5);
        assert_eq!(est.folds.len(), 3);
        assert!(est.sigma_theta > 0.0);
        assert_relative_eq!(est.theta, fold_theta_mean(&est), epsilon = 1e-15);
    }

    #[test]
    fn noiseless_linear_target_is_recovered() {
        let mut fd = toy_sample(10, 3, 3);
        fd.ytilde = (0..fd.n_rows()).map(|i| 2.0 * fd.xpair[(i, 0)] - fd.xpair[(i, 3)] + 1.0).collect();
        let folds = block_kfold(fd.n_units(), 2, 1).unwrap();
        let nuis = learn_nuisances(&fd, &folds, &NuisanceLearners::same(LearnerSpec::linear()), 1).unwrap();
        assert!(nuis.mse_l < 1e-20);
    }

    #[test]
    fn lasso_fast_path_matches_generic_structure() {
        let fd = toy_sample(30, 4, 4);
        let folds = block_kfold(fd.n_units(), 3, 2).unwrap();
        let spec = LearnerSpec::new(LearnerKind::Lasso(LassoSpec {
            dictionary: crate::learners::Dictionary::None,
            ..Default::default()
        }));
        let a = learn_nuisances(&fd, &folds, &NuisanceLearners::same(spec.clone()), 3).unwrap();
        let b = learn_nuisances(&fd, &folds, &NuisanceLearners::same(spec), 3).unwrap();
        assert_eq!(a, b);
        let lin = learn_nuisances(&fd, &folds, &NuisanceLearners::same(LearnerSpec::linear()), 3).unwrap();
        // With a handful of relevant regressors the lasso is close to OLS.
        assert!((a.mse_l - lin.mse_l).abs() < 0.25 * lin.mse_l);
    }

    #[test]
    fn probe_is_zero_at_zero_step_and_for_neutral_instrument_direction() {
        let fd = toy_sample(20, 4, 6);
        let folds = block_kfold(fd.n_units(), 2, 1).unwrap();
        let nuis = learn_nuisances(&fd, &folds, &NuisanceLearners::same(LearnerSpec::linear()), 1).unwrap();
        let n = fd.n_rows();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = NuisanceDirection {
            l: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            r: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            m: DMatrix::from_fn(n, 1, |_, _| rng.sample(StandardNormal)),
        };
        assert_eq!(orthogonality_probe(&fd, &folds, &nuis, &raw, 0.0).unwrap(), 0.0);
        // Perturb only M̂, orthogonally to both residuals within each fold.
        let res = Residuals::new(&fd, &nuis);
        let mut m_only = NuisanceDirection { l: vec![0.0; n], r: vec![0.0; n], m: raw.m.clone() };
        for rows in folds.rows(&fd) {
            let rk = res.rows(&rows);
            let basis = DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { rk.ey[i] } else { rk.ed[i] });
            let h = project_out(&basis, &DVector::from_iterator(rows.len(), rows.iter().map(|&i| raw.m[(i, 0)])));
            for (a, &i) in rows.iter().enumerate() {
                m_only.m[(i, 0)] = h[a];
            }
        }
        for eps in [1e-3, 0.1, 1.0] {
            let d = orthogonality_probe(&fd, &folds, &nuis, &m_only, eps).unwrap();
            assert!(d.abs() < 1e-12, "eps {eps}: {d}");
        }
    }

    #[test]
    fn probe_decays_quadratically_along_orthogonalized_direction() {
        let fd = toy_sample(40, 5, 9);
        let folds = block_kfold(fd.n_units(), 2, 3).unwrap();
        let nuis = learn_nuisances(&fd, &folds, &NuisanceLearners::same(LearnerSpec::linear()), 3).unwrap();
        let n = fd.n_rows();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = NuisanceDirection {
            l: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            r: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            m: DMatrix::from_fn(n, 1, |_, _| rng.sample(StandardNormal)),
        };
        let h = orthogonalize_direction(&fd, &folds, &nuis, &raw);
        let pts: Vec<(f64, f64)> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&e| (e, orthogonality_probe(&fd, &folds, &nuis, &h, e).unwrap().abs()))
            .collect();
        let slope = (pts[0].1.ln() - pts[2].1.ln()) / (pts[0].0.ln() - pts[2].0.ln());
        assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
    }
}
