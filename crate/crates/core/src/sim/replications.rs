//! Replication orchestration over simulated panels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{dgp_generate, DgpConfig};
use super::table::{McReport, McRow};
use crate::dml::{estimate_dml, DmlConfig, NuisanceLearners};
use crate::learners::{BoostingSpec, LearnerKind, LearnerSpec, LassoSpec, MlpSpec, NROUNDS_SIMULATION};
use crate::panel::first_difference;
use crate::tsls::{estimate_2sls_fd, Controls};
use crate::weak_iv::{CsRegime, IvInference};
use crate::{Error, Result};

/// Estimators available to the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum McEstimator {
    /// 2SLS on differences with an intercept only.
    #[serde(rename = "2sls")]
    Tsls,
    /// 2SLS on differences with current and lagged covariates.
    #[serde(rename = "2sls-x")]
    TslsX,
    #[serde(rename = "dml-lasso")]
    DmlLasso,
    #[serde(rename = "dml-boosting")]
    DmlBoosting,
    #[serde(rename = "dml-mlp")]
    DmlMlp,
    #[serde(rename = "dml-linear")]
    DmlLinear,
}

impl McEstimator {
    pub const ALL: [McEstimator; 6] = [
        McEstimator::Tsls,
        McEstimator::TslsX,
        McEstimator::DmlLasso,
        McEstimator::DmlBoosting,
        McEstimator::DmlMlp,
        McEstimator::DmlLinear,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            McEstimator::Tsls => "2sls",
            McEstimator::TslsX => "2sls-x",
            McEstimator::DmlLasso => "dml-lasso",
            McEstimator::DmlBoosting => "dml-boosting",
            McEstimator::DmlMlp => "dml-mlp",
            McEstimator::DmlLinear => "dml-linear",
        }
    }

    pub fn parse(s: &str) -> Result<McEstimator> {
        Self::ALL.iter().copied().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|e| e.name()).collect();
            Error::InvalidArgument(format!("unknown estimator `{s}` (expected one of {})", names.join(", ")))
        })
    }

    /// Nuisance learner used by a DML estimator.
    pub fn learner(&self, tune: bool) -> Option<LearnerSpec> {
        let kind = match self {
            McEstimator::Tsls | McEstimator::TslsX => return None,
            McEstimator::DmlLasso => LearnerKind::Lasso(LassoSpec::default()),
            McEstimator::DmlBoosting => LearnerKind::Boosting(BoostingSpec {
                nrounds: NROUNDS_SIMULATION,
                ..Default::default()
            }),
            McEstimator::DmlMlp => LearnerKind::Mlp(MlpSpec::default()),
            McEstimator::DmlLinear => LearnerKind::Linear,
        };
        Some(LearnerSpec { kind, tune, seed: 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    /// Design; its seed is the base seed, replication `r` uses `seed + r`.
    pub dgp: DgpConfig,
    pub replications: usize,
    pub estimators: Vec<McEstimator>,
    pub folds: usize,
    pub level: f64,
    pub theta0: f64,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    pub tune: bool,
    /// Label printed in the table header.
    pub design: String,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            dgp: DgpConfig::default(),
            replications: 100,
            estimators: vec![McEstimator::Tsls, McEstimator::DmlLasso],
            folds: 3,
            level: 0.95,
            theta0: 0.0,
            threads: 0,
            tune: false,
            design: "strong".into(),
        }
    }
}

/// What one estimator produced on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub theta: f64,
    pub se: f64,
    pub rmse_l: f64,
    pub rmse_r: f64,
    pub rmse_m: f64,
    pub f_stat: f64,
    pub ar_pvalue: f64,
    pub regime: CsRegime,
    pub includes_zero: bool,
}

fn mean_sqrt(v: &[f64]) -> f64 {
    (v.iter().sum::<f64>() / v.len() as f64).sqrt()
}

/// Run one estimator on one simulated panel.
pub fn run_estimator(est: McEstimator, dgp: &DgpConfig, cfg: &McConfig) -> Result<ReplicationOutcome> {
    let sim = dgp_generate(dgp)?;
    let fd = first_difference(&sim.data)?;
    let (theta, se, l, r, m, rep) = match est {
        McEstimator::Tsls | McEstimator::TslsX => {
            let controls = if est == McEstimator::Tsls { Controls::None } else { Controls::All };
            let e = estimate_2sls_fd(&fd, &controls)?;
            let rep = e.weak_iv(cfg.level, cfg.theta0)?;
            (e.theta, e.se_theta(), e.mse_l.sqrt(), e.mse_r.sqrt(), mean_sqrt(&e.mse_m), rep)
        }
        _ => {
            let spec = est.learner(cfg.tune).expect("DML estimator has a learner");
            let dml = DmlConfig {
                folds: cfg.folds,
                seed: dgp.seed,
                learners: NuisanceLearners::same(spec),
            };
            let e = estimate_dml(&fd, &dml)?;
            let rep = e.weak_iv(cfg.level, cfg.theta0)?;
            (e.theta, e.se_theta(), e.mse_l.sqrt(), e.mse_r.sqrt(), mean_sqrt(&e.mse_m), rep)
        }
    };
    Ok(ReplicationOutcome {
        theta,
        se,
        rmse_l: l,
        rmse_r: r,
        rmse_m: m,
        f_stat: rep.f_stat,
        ar_pvalue: rep.ar_pvalue,
        regime: rep.cs.regime,
        includes_zero: rep.cs.includes_zero(),
    })
}

/// Largest tolerated share of failed replications (exclusive).
pub const MAX_FAILURE_SHARE: f64 = 0.05;

/// Run every replication and estimator and summarise.
///
/// Replications run in parallel; the report depends only on the seeds.
pub fn run_replications(cfg: &McConfig) -> Result<McReport> {
    if cfg.replications == 0 {
        return Err(Error::InvalidArgument("at least one replication required".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::InvalidArgument("no estimators selected".into()));
    }
    cfg.dgp.validate()?;
    let work = || -> Vec<Vec<Result<ReplicationOutcome>>> {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                let dgp = DgpConfig {
                    seed: cfg.dgp.seed.wrapping_add(r as u64),
                    ..cfg.dgp.clone()
                };
                cfg.estimators.iter().map(|&e| run_estimator(e, &dgp, cfg)).collect()
            })
            .collect()
    };
    let results = if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(work)
    } else {
        work()
    };

    let mut rows = Vec::with_capacity(cfg.estimators.len());
    for (j, est) in cfg.estimators.iter().enumerate() {
        let mut ok = Vec::with_capacity(cfg.replications);
        let mut failed = 0;
        let mut first: Option<String> = None;
        for rep in &results {
            match &rep[j] {
                Ok(o) => ok.push(o.clone()),
                Err(e) => {
                    failed += 1;
                    first.get_or_insert_with(|| format!("{}: {e}", est.name()));
                }
            }
        }
        if failed as f64 >= MAX_FAILURE_SHARE * cfg.replications as f64 && failed > 0 {
            return Err(Error::TooManyFailures {
                failed,
                total: cfg.replications,
                first: first.unwrap_or_default(),
            });
        }
        rows.push(McRow::from_outcomes(est.name(), cfg.dgp.theta, &ok, failed));
    }
    Ok(McReport {
        design: cfg.design.clone(),
        n_units: cfg.dgp.n_units,
        periods: cfg.dgp.periods,
        replications: cfg.replications,
        folds: cfg.folds,
        seed: cfg.dgp.seed,
        level: cfg.level,
        theta0: cfg.theta0,
        rows,
    })
}
