//! Nuisance regression learners, their configuration and tuning.

pub mod boosting;
pub mod dictionary;
pub mod lasso;
pub mod linear;
pub mod mlp;
pub mod tuning;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};
use boosting::{fit_boosting, BoostingModel, BoostingParams};
use dictionary::{blockwise_dictionary, extended_dictionary};
use lasso::{fit_lasso, LambdaChoice, LassoModel};
use linear::{fit_linear, LinearModel};
use mlp::{fit_mlp, MlpModel, MlpParams};

/// Feature expansion applied before the lasso.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dictionary {
    /// Raw columns.
    None,
    /// Polynomials to order three and all pairwise interactions.
    Extended,
    /// The extended dictionary applied to each half of the columns
    /// separately, i.e. to current and lagged covariates on their own.
    #[default]
    ExtendedPerPeriod,
}

impl Dictionary {
    pub fn expand(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Dictionary::None => Ok(x.clone()),
            Dictionary::Extended => Ok(extended_dictionary(x)),
            Dictionary::ExtendedPerPeriod => {
                if x.ncols() % 2 != 0 {
                    return Err(Error::InvalidArgument(
                        "per-period dictionary needs an even number of columns".into(),
                    ));
                }
                if x.ncols() == 0 {
                    return Ok(x.clone());
                }
                Ok(blockwise_dictionary(x, 2))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LassoSpec {
    #[serde(default)]
    pub dictionary: Dictionary,
    /// Number of automatic penalty values.
    #[serde(default = "default_nlambda")]
    pub nlambda: usize,
    /// Smallest penalty as a fraction of the largest; defaults by shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_min_ratio: Option<f64>,
    /// Explicit penalty grid; overrides the automatic one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default = "default_nfolds")]
    pub nfolds: usize,
}

fn default_nlambda() -> usize {
    100
}
fn default_nfolds() -> usize {
    5
}

impl Default for LassoSpec {
    fn default() -> Self {
        LassoSpec {
            dictionary: Dictionary::default(),
            nlambda: default_nlambda(),
            lambda_min_ratio: None,
            lambda: None,
            nfolds: default_nfolds(),
        }
    }
}

impl LassoSpec {
    pub fn lambda_choice(&self) -> LambdaChoice {
        match &self.lambda {
            Some(v) => LambdaChoice::Grid(v.clone()),
            None => LambdaChoice::Auto {
                n_lambda: self.nlambda,
                min_ratio: self.lambda_min_ratio,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostingSpec {
    #[serde(default = "default_nrounds")]
    pub nrounds: usize,
    #[serde(default = "default_maxdepth")]
    pub maxdepth: usize,
    /// L2 penalty on leaf weights.
    #[serde(default = "default_l2")]
    pub lambda: f64,
    /// Shrinkage (learning rate).
    #[serde(default = "default_eta")]
    pub eta: f64,
}

/// Boosting rounds for empirical use; Monte Carlo presets use 100.
pub const NROUNDS_EMPIRICAL: usize = 1000;
pub const NROUNDS_SIMULATION: usize = 100;

fn default_nrounds() -> usize {
    NROUNDS_EMPIRICAL
}
fn default_maxdepth() -> usize {
    6
}
fn default_l2() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    0.1
}

impl Default for BoostingSpec {
    fn default() -> Self {
        BoostingSpec {
            nrounds: default_nrounds(),
            maxdepth: default_maxdepth(),
            lambda: default_l2(),
            eta: default_eta(),
        }
    }
}

impl BoostingSpec {
    pub fn params(&self) -> BoostingParams {
        BoostingParams {
            nrounds: self.nrounds,
            maxdepth: self.maxdepth,
            l2_lambda: self.lambda,
            shrinkage: self.eta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_maxit")]
    pub maxit: usize,
    #[serde(rename = "MaxNWts", default = "default_maxnwts")]
    pub max_nwts: usize,
}

fn default_size() -> usize {
    5
}
fn default_decay() -> f64 {
    0.1
}
fn default_maxit() -> usize {
    100
}
fn default_maxnwts() -> usize {
    2000
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            size: default_size(),
            decay: default_decay(),
            maxit: default_maxit(),
            max_nwts: default_maxnwts(),
        }
    }
}

impl MlpSpec {
    pub fn params(&self) -> MlpParams {
        MlpParams {
            size: self.size,
            decay: self.decay,
            maxit: self.maxit,
            max_weights: self.max_nwts,
        }
    }
}

/// Learner family with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerKind {
    Lasso(LassoSpec),
    Boosting(BoostingSpec),
    Mlp(MlpSpec),
    Linear,
}

impl LearnerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerKind::Lasso(_) => "lasso",
            LearnerKind::Boosting(_) => "boosting",
            LearnerKind::Mlp(_) => "mlp",
            LearnerKind::Linear => "linear",
        }
    }

    /// Default hyperparameters for a learner name.
    pub fn from_name(name: &str) -> Result<LearnerKind> {
        match name {
            "lasso" => Ok(LearnerKind::Lasso(LassoSpec::default())),
            "boosting" => Ok(LearnerKind::Boosting(BoostingSpec::default())),
            "mlp" => Ok(LearnerKind::Mlp(MlpSpec::default())),
            "linear" => Ok(LearnerKind::Linear),
            other => Err(Error::InvalidArgument(format!(
                "unknown learner `{other}` (expected lasso, boosting, mlp or linear)"
            ))),
        }
    }
}

/// A learner, whether to tune it, and its seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(flatten)]
    pub kind: LearnerKind,
    #[serde(default)]
    pub tune: bool,
    #[serde(default)]
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind) -> Self {
        LearnerSpec { kind, tune: false, seed: 0 }
    }

    pub fn lasso() -> Self {
        Self::new(LearnerKind::Lasso(LassoSpec::default()))
    }

    pub fn linear() -> Self {
        Self::new(LearnerKind::Linear)
    }

    /// Compact one-line description of the hyperparameters.
    pub fn summary(&self) -> String {
        match &self.kind {
            LearnerKind::Lasso(l) => format!("lasso nfolds={} nlambda={}", l.nfolds, l.nlambda),
            LearnerKind::Boosting(b) => format!(
                "boosting nrounds={} maxdepth={} lambda={} eta={}",
                b.nrounds, b.maxdepth, b.lambda, b.eta
            ),
            LearnerKind::Mlp(m) => format!("mlp size={} decay={} maxit={}", m.size, m.decay, m.maxit),
            LearnerKind::Linear => "linear".into(),
        }
    }

    /// Check hyperparameters against the admissible tuning ranges.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match &self.kind {
            LearnerKind::Lasso(s) => {
                if s.nfolds < 2 {
                    return bad("lasso nfolds must be at least 2".into());
                }
                if s.nlambda == 0 || s.lambda_min_ratio.is_some_and(|r| !(r > 0.0 && r < 1.0)) {
                    return bad("lasso needs nlambda ≥ 1 and lambda_min_ratio in (0, 1)".into());
                }
            }
            LearnerKind::Boosting(s) => {
                if !(0.0..=2.0).contains(&s.lambda) {
                    return bad(format!("boosting lambda must lie in [0, 2], got {}", s.lambda));
                }
                if !(2..=10).contains(&s.maxdepth) {
                    return bad(format!("boosting maxdepth must lie in 2..=10, got {}", s.maxdepth));
                }
                if !(s.eta > 0.0 && s.eta <= 1.0) {
                    return bad(format!("boosting eta must lie in (0, 1], got {}", s.eta));
                }
            }
            LearnerKind::Mlp(s) => {
                if !(2..=10).contains(&s.size) {
                    return bad(format!("mlp size must lie in 2..=10, got {}", s.size));
                }
                if !(0.0..=0.5).contains(&s.decay) {
                    return bad(format!("mlp decay must lie in [0, 0.5], got {}", s.decay));
                }
                if s.maxit == 0 {
                    return bad("mlp maxit must be positive".into());
                }
                if s.max_nwts > 2000 {
                    return bad(format!("mlp MaxNWts must not exceed 2000, got {}", s.max_nwts));
                }
            }
            LearnerKind::Linear => {}
        }
        Ok(())
    }

    pub fn fit(&self, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedModel> {
        self.fit_seeded(x, y, self.seed)
    }

    /// Fit with an explicit seed (used by cross-fitting to derive per-fold seeds).
    pub fn fit_seeded(&self, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Result<FittedModel> {
        let n_features = x.ncols();
        let model = match &self.kind {
            LearnerKind::Lasso(s) => {
                let xd = s.dictionary.expand(x)?;
                let folds = s.nfolds.min(x.nrows());
                Model::Lasso(fit_lasso(&xd, y, &s.lambda_choice(), folds, seed)?, s.dictionary)
            }
            LearnerKind::Boosting(s) => Model::Boosting(fit_boosting(x, y, &s.params(), seed)?),
            LearnerKind::Mlp(s) => Model::Mlp(fit_mlp(x, y, &s.params(), seed)?),
            LearnerKind::Linear => Model::Linear(fit_linear(x, y)?),
        };
        let mut fitted = FittedModel {
            model,
            training_rmse: 0.0,
            n_features,
        };
        let pred = fitted.predict(x)?;
        fitted.training_rmse = crate::linalg::mse(&pred, y).sqrt();
        Ok(fitted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Lasso(LassoModel, Dictionary),
    Boosting(BoostingModel),
    Mlp(MlpModel),
    Linear(LinearModel),
}

/// A trained learner. Immutable after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub model: Model,
    pub training_rmse: f64,
    pub n_features: usize,
}

impl FittedModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Dimension(format!(
                "model expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok(match &self.model {
            Model::Lasso(m, d) => m.predict(&d.expand(x)?),
            Model::Boosting(m) => m.predict(x),
            Model::Mlp(m) => m.predict(x),
            Model::Linear(m) => (0..x.nrows()).map(|i| m.predict_row(x.row(i).iter().cloned())).collect(),
        })
    }
}
