//! Configuration file, merged with flags into fully resolved run plans.
//!
//! The file is TOML. Top-level `seed` and `threads`, then the sections
//! `[data]`, `[estimate]`, `[learner]` (with optional `[learner_l]`,
//! `[learner_r]`, `[learner_m]`), `[simulate]`, `[tune]` and `[output]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pivdml::dml::NuisanceLearners;
use pivdml::learners::{BoostingSpec, LearnerKind, LearnerSpec, NROUNDS_SIMULATION};
use pivdml::panel::Schema;
use pivdml::report::Format;
use pivdml::sim::{DgpConfig, McConfig, McEstimator};

use crate::args::{DataArgs, EstimateArgs, FormatName, LearnerName, OutputArgs, Preset, SimulateArgs, Target, TuneArgs};
use crate::error::CliError;

pub const SEED_ENV: &str = "PIVDML_SEED";
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_FOLDS: usize = 3;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    pub learner: Option<LearnerSpec>,
    pub learner_l: Option<LearnerSpec>,
    pub learner_r: Option<LearnerSpec>,
    pub learner_m: Option<LearnerSpec>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub tune: TuneSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub unit: Option<String>,
    pub time: Option<String>,
    pub y: Option<String>,
    pub d: Option<String>,
    pub z: Option<Vec<String>>,
    pub x: Option<Vec<String>>,
    pub cluster: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub folds: Option<usize>,
    pub level: Option<f64>,
    pub theta0: Option<f64>,
    pub tune: Option<bool>,
    pub compare_2sls: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub preset: Option<String>,
    pub n: Option<usize>,
    pub periods: Option<usize>,
    pub replications: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub folds: Option<usize>,
    pub tune: Option<bool>,
    pub level: Option<f64>,
    pub theta0: Option<f64>,
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    pub target: Option<String>,
    pub instrument: Option<String>,
    pub candidates: Option<usize>,
    pub evaluations: Option<usize>,
    pub cv_folds: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<PathBuf>,
    pub format: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Settings that do not change numerical output.
#[derive(Debug, Clone)]
pub struct Runtime {
    pub threads: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataPlan {
    pub path: PathBuf,
    pub unit: String,
    pub time: String,
    pub y: String,
    pub d: String,
    pub z: Vec<String>,
    pub x: Vec<String>,
    pub cluster: Option<String>,
}

impl DataPlan {
    pub fn schema(&self) -> Schema {
        Schema {
            unit: self.unit.clone(),
            time: self.time.clone(),
            y: self.y.clone(),
            d: self.d.clone(),
            z: self.z.clone(),
            x: self.x.clone(),
            cluster: self.cluster.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatePlan {
    pub seed: u64,
    pub data: DataPlan,
    pub folds: usize,
    pub level: f64,
    pub theta0: f64,
    pub compare_2sls: bool,
    pub format: String,
    pub learner_l: LearnerSpec,
    pub learner_r: LearnerSpec,
    pub learner_m: LearnerSpec,
}

impl EstimatePlan {
    pub fn learners(&self) -> NuisanceLearners {
        NuisanceLearners {
            l: self.learner_l.clone(),
            r: self.learner_r.clone(),
            m: self.learner_m.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulatePlan {
    pub seed: u64,
    pub preset: String,
    pub n: usize,
    pub periods: usize,
    pub replications: usize,
    pub estimators: Vec<String>,
    pub folds: usize,
    pub tune: bool,
    pub level: f64,
    pub theta0: f64,
    pub format: String,
    #[serde(skip)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TunePlan {
    pub seed: u64,
    pub data: DataPlan,
    pub target: String,
    pub instrument: Option<String>,
    pub learner: LearnerSpec,
    pub candidates: usize,
    pub evaluations: usize,
    pub cv_folds: usize,
}

/// SHA-256 of the plan's TOML rendering, as 16 hex digits.
pub fn config_hash<T: Serialize>(plan: &T) -> String {
    let text = toml::to_string(plan).expect("plans serialize to TOML");
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn resolve_runtime(o: &OutputArgs, f: &FileConfig) -> Runtime {
    Runtime {
        threads: o.threads.or(f.threads).unwrap_or(0),
        out: o.out.clone().or_else(|| f.output.path.clone()),
    }
}

fn resolve_format(flag: Option<FormatName>, f: &FileConfig) -> Result<Format, CliError> {
    match (flag, f.output.format.as_deref()) {
        (Some(FormatName::Table), _) => Ok(Format::Table),
        (Some(FormatName::Kv), _) => Ok(Format::Kv),
        (None, Some(s)) => s.parse().map_err(|e: pivdml::Error| CliError::Config(e.to_string())),
        (None, None) => Ok(Format::Table),
    }
}

fn format_name(f: Format) -> String {
    match f {
        Format::Table => "table".into(),
        Format::Kv => "kv".into(),
    }
}

fn required(flag: &Option<String>, file: &Option<String>, what: &str) -> Result<String, CliError> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| CliError::Config(format!("missing required column role --{what}")))
}

fn resolve_data(a: &DataArgs, f: &DataSection) -> Result<DataPlan, CliError> {
    let path = a
        .data
        .clone()
        .or_else(|| f.path.clone())
        .ok_or_else(|| CliError::Config("missing --data".into()))?;
    let z = if a.z.is_empty() { f.z.clone().unwrap_or_default() } else { a.z.clone() };
    if z.is_empty() {
        return Err(CliError::Config("missing required column role --z".into()));
    }
    Ok(DataPlan {
        path,
        unit: required(&a.unit, &f.unit, "unit")?,
        time: required(&a.time, &f.time, "time")?,
        y: required(&a.y, &f.y, "y")?,
        d: required(&a.d, &f.d, "d")?,
        z,
        x: if a.x.is_empty() { f.x.clone().unwrap_or_default() } else { a.x.clone() },
        cluster: a.cluster.clone().or_else(|| f.cluster.clone()),
    })
}

fn check_folds(k: usize) -> Result<usize, CliError> {
    if k < 2 {
        return Err(CliError::Config("K ≥ 2 required".into()));
    }
    Ok(k)
}

fn check_level(level: f64) -> Result<f64, CliError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Config(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(level)
}

fn spec_for(name: LearnerName) -> LearnerSpec {
    LearnerSpec::new(LearnerKind::from_name(name.as_str()).expect("known learner name"))
}

pub fn resolve_estimate(a: &EstimateArgs, f: &FileConfig) -> Result<(EstimatePlan, Runtime), CliError> {
    let folds = check_folds(a.folds.or(f.estimate.folds).unwrap_or(DEFAULT_FOLDS))?;
    let level = check_level(a.level.or(f.estimate.level).unwrap_or(DEFAULT_LEVEL))?;
    let base = f.learner.clone().unwrap_or_else(LearnerSpec::lasso);
    let pick = |own: &Option<LearnerSpec>| match a.learner {
        Some(name) => spec_for(name),
        None => own.clone().unwrap_or_else(|| base.clone()),
    };
    let tune = a.tune || f.estimate.tune.unwrap_or(false);
    let with_tune = |mut s: LearnerSpec| {
        s.tune |= tune;
        s
    };
    let plan = EstimatePlan {
        seed: resolve_seed(a.output.seed, f.seed)?,
        data: resolve_data(&a.data, &f.data)?,
        folds,
        level,
        theta0: a.theta0.or(f.estimate.theta0).unwrap_or(0.0),
        compare_2sls: a.compare_2sls || f.estimate.compare_2sls.unwrap_or(false),
        format: format_name(resolve_format(a.output.format, f)?),
        learner_l: with_tune(pick(&f.learner_l)),
        learner_r: with_tune(pick(&f.learner_r)),
        learner_m: with_tune(pick(&f.learner_m)),
    };
    plan.learners().validate()?;
    Ok((plan, resolve_runtime(&a.output, f)))
}

fn parse_preset(s: &str) -> Result<Preset, CliError> {
    match s {
        "strong" => Ok(Preset::Strong),
        "weak" => Ok(Preset::Weak),
        other => Err(CliError::Config(format!("unknown preset `{other}` (expected strong or weak)"))),
    }
}

pub fn resolve_simulate(a: &SimulateArgs, f: &FileConfig) -> Result<(SimulatePlan, Runtime), CliError> {
    let s = &f.simulate;
    let preset = match (a.preset, s.preset.as_deref()) {
        (Some(p), _) => p,
        (None, Some(name)) => parse_preset(name)?,
        (None, None) => Preset::Strong,
    };
    let estimators = if a.estimators.is_empty() {
        s.estimators.clone().unwrap_or_else(|| vec!["2sls".into(), "dml-lasso".into()])
    } else {
        a.estimators.clone()
    };
    for e in &estimators {
        McEstimator::parse(e)?;
    }
    let replications = a.replications.or(s.replications).unwrap_or(50);
    if replications == 0 {
        return Err(CliError::Config("replications must be at least 1".into()));
    }
    let plan = SimulatePlan {
        seed: resolve_seed(a.output.seed, f.seed)?,
        preset: match preset {
            Preset::Strong => "strong".into(),
            Preset::Weak => "weak".into(),
        },
        n: a.n.or(s.n).unwrap_or(100),
        periods: a.periods.or(s.periods).unwrap_or(10),
        replications,
        estimators,
        folds: check_folds(a.folds.or(s.folds).unwrap_or(DEFAULT_FOLDS))?,
        tune: a.tune || s.tune.unwrap_or(false),
        level: check_level(a.level.or(s.level).unwrap_or(DEFAULT_LEVEL))?,
        theta0: a.theta0.or(s.theta0).unwrap_or(0.0),
        format: format_name(resolve_format(a.output.format, f)?),
        csv: a.csv.clone().or_else(|| s.csv.clone()),
    };
    Ok((plan, resolve_runtime(&a.output, f)))
}

impl SimulatePlan {
    pub fn mc_config(&self, threads: usize) -> Result<McConfig, CliError> {
        let base = match self.preset.as_str() {
            "weak" => DgpConfig::weak(self.n),
            _ => DgpConfig::strong(self.n),
        };
        let dgp = DgpConfig { periods: self.periods, seed: self.seed, ..base };
        dgp.validate()?;
        Ok(McConfig {
            dgp,
            replications: self.replications,
            estimators: self.estimators.iter().map(|e| McEstimator::parse(e)).collect::<Result<_, _>>()?,
            folds: self.folds,
            level: self.level,
            theta0: self.theta0,
            threads,
            tune: self.tune,
            design: self.preset.clone(),
        })
    }
}

pub fn resolve_tune(a: &TuneArgs, f: &FileConfig) -> Result<(TunePlan, Runtime), CliError> {
    let t = &f.tune;
    let target = match (a.target, t.target.as_deref()) {
        (Some(Target::L), _) | (None, Some("l")) => "l",
        (Some(Target::R), _) | (None, Some("r")) => "r",
        (Some(Target::M), _) | (None, Some("m")) => "m",
        (None, Some(other)) => return Err(CliError::Config(format!("unknown tuning target `{other}` (expected l, r or m)"))),
        (None, None) => return Err(CliError::Config("missing --target (l, r or m)".into())),
    };
    let own = match target {
        "l" => &f.learner_l,
        "r" => &f.learner_r,
        _ => &f.learner_m,
    };
    let learner = match a.learner {
        Some(name) => spec_for(name),
        None => own.clone().or_else(|| f.learner.clone()).unwrap_or_else(|| {
            LearnerSpec::new(LearnerKind::Boosting(BoostingSpec { nrounds: NROUNDS_SIMULATION, ..Default::default() }))
        }),
    };
    learner.validate()?;
    let plan = TunePlan {
        seed: resolve_seed(a.output.seed, f.seed)?,
        data: resolve_data(&a.data, &f.data)?,
        target: target.into(),
        instrument: a.instrument.clone().or_else(|| t.instrument.clone()),
        learner,
        candidates: a.candidates.or(t.candidates).unwrap_or(pivdml::dml::TUNE_CANDIDATES),
        evaluations: a.evaluations.or(t.evaluations).unwrap_or(pivdml::dml::TUNE_EVALUATIONS),
        cv_folds: a.cv_folds.or(t.cv_folds).unwrap_or(pivdml::dml::TUNE_CV_FOLDS),
    };
    Ok((plan, resolve_runtime(&a.output, f)))
}
