//! Randomized grid search over learner hyperparameters.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lasso::random_blocks;
use super::{LearnerKind, LearnerSpec};
use crate::linalg::select_rows;
use crate::{derive_seed, Error, Result};

pub const BOOSTING_LAMBDA_RANGE: (f64, f64) = (0.0, 2.0);
pub const BOOSTING_DEPTH_RANGE: (usize, usize) = (2, 10);
pub const MLP_SIZE_RANGE: (usize, usize) = (2, 10);
pub const MLP_DECAY_RANGE: (f64, f64) = (0.0, 0.5);

/// Outcome of a search: the selected spec and every evaluated candidate.
#[derive(Debug, Clone)]
pub struct TuneResult {
    pub best: LearnerSpec,
    pub best_cv_mse: f64,
    pub evaluations: Vec<(LearnerSpec, f64)>,
}

/// Draw `n` distinct integers uniformly from the inclusive range.
fn distinct_ints(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize), n: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (lo..=hi).collect();
    all.shuffle(rng);
    all.truncate(n);
    all.sort_unstable();
    all
}

fn distinct_reals(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::with_capacity(n);
    while v.len() < n {
        let c = rng.random_range(lo..=hi);
        if !v.contains(&c) {
            v.push(c);
        }
    }
    v.sort_by(f64::total_cmp);
    v
}

/// Candidate specs: distinct draws per hyperparameter, crossed, shuffled.
pub fn draw_candidates(spec: &LearnerSpec, n_per_hp: usize, seed: u64) -> Vec<LearnerSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let with = |kind: LearnerKind| LearnerSpec { kind, tune: false, seed: spec.seed };
    match &spec.kind {
        LearnerKind::Boosting(b) => {
            let lambdas = distinct_reals(&mut rng, BOOSTING_LAMBDA_RANGE, n_per_hp);
            let depths = distinct_ints(&mut rng, BOOSTING_DEPTH_RANGE, n_per_hp);
            for &lambda in &lambdas {
                for &maxdepth in &depths {
                    out.push(with(LearnerKind::Boosting(super::BoostingSpec { lambda, maxdepth, ..b.clone() })));
                }
            }
        }
        LearnerKind::Mlp(m) => {
            let sizes = distinct_ints(&mut rng, MLP_SIZE_RANGE, n_per_hp);
            let decays = distinct_reals(&mut rng, MLP_DECAY_RANGE, n_per_hp);
            for &size in &sizes {
                for &decay in &decays {
                    out.push(with(LearnerKind::Mlp(super::MlpSpec { size, decay, ..m.clone() })));
                }
            }
        }
        // The lasso penalty is chosen by its own cross-validation; linear has nothing to tune.
        LearnerKind::Lasso(_) | LearnerKind::Linear => out.push(with(spec.kind.clone())),
    }
    out.shuffle(&mut rng);
    out
}

/// Mean squared out-of-fold prediction error over the given row folds.
pub fn cv_mse(spec: &LearnerSpec, x: &DMatrix<f64>, y: &[f64], folds: &[Vec<usize>], seed: u64) -> Result<f64> {
    let n = x.nrows();
    let mut in_fold = vec![usize::MAX; n];
    for (k, rows) in folds.iter().enumerate() {
        for &i in rows {
            in_fold[i] = k;
        }
    }
    let mut sse = 0.0;
    let mut count = 0usize;
    for (k, rows) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..n).filter(|&i| in_fold[i] != k).collect();
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = spec
            .fit_seeded(&select_rows(x, &train), &ytr, derive_seed(seed, k as u64, 0))
            .map_err(|e| e.in_fold(k + 1))?;
        let pred = model.predict(&select_rows(x, rows))?;
        for (p, &i) in pred.iter().zip(rows) {
            sse += (p - y[i]).powi(2);
        }
        count += rows.len();
    }
    Ok(sse / count as f64)
}

/// Evaluate explicit candidates on shared folds and pick the minimum CV MSE.
/// Ties go to the earliest candidate.
pub fn evaluate_candidates(
    candidates: &[LearnerSpec],
    x: &DMatrix<f64>,
    y: &[f64],
    cv_folds: usize,
    seed: u64,
) -> Result<TuneResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no tuning candidates".into()));
    }
    if cv_folds < 2 || x.nrows() < cv_folds {
        return Err(Error::InvalidArgument(format!(
            "tuning needs n ≥ cv_folds ≥ 2 (n = {}, cv_folds = {cv_folds})",
            x.nrows()
        )));
    }
    let folds = random_blocks(x.nrows(), cv_folds, seed);
    let mut evaluations = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mse = cv_mse(c, x, y, &folds, seed)?;
        evaluations.push((c.clone(), mse));
    }
    let (bi, _) = evaluations
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bm), (i, (_, m))| if *m < bm { (i, *m) } else { (bi, bm) });
    Ok(TuneResult {
        best: evaluations[bi].0.clone(),
        best_cv_mse: evaluations[bi].1,
        evaluations,
    })
}

/// Draw candidates and evaluate the first `n_evaluations` of them.
pub fn grid_search_tune(
    spec: &LearnerSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    n_candidates_per_hp: usize,
    n_evaluations: usize,
    cv_folds: usize,
    seed: u64,
) -> Result<TuneResult> {
    if n_candidates_per_hp == 0 || n_evaluations == 0 {
        return Err(Error::InvalidArgument("tuning needs at least one candidate and one evaluation".into()));
    }
    let mut candidates = draw_candidates(spec, n_candidates_per_hp, seed);
    candidates.truncate(n_evaluations);
    evaluate_candidates(&candidates, x, y, cv_folds, derive_seed(seed, 1, 0))
}
