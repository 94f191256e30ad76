//! Estimate reports as an aligned text table or a flat `key = value` document.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::dml::DmlEstimate;
use crate::tsls::TslsEstimate;
use crate::weak_iv::WeakIvReport;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Table,
    Kv,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Format> {
        match s {
            "table" => Ok(Format::Table),
            "kv" => Ok(Format::Kv),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}` (expected table or kv)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Real(f64),
    Int(u64),
    Bool(bool),
    Text(String),
}

impl Value {
    fn exact(&self) -> String {
        match self {
            Value::Real(v) => fmt_exact(*v),
            Value::Int(v) => v.to_string(),
            Value::Bool(v) => v.to_string(),
            Value::Text(s) => s.clone(),
        }
    }

    fn pretty(&self) -> String {
        match self {
            Value::Real(v) => fmt_pretty(*v),
            other => other.exact(),
        }
    }
}

fn fmt_exact(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:e}")
    }
}

fn fmt_pretty(v: f64) -> String {
    let a = v.abs();
    if !v.is_finite() {
        fmt_exact(v)
    } else if a != 0.0 && !(1e-4..1e6).contains(&a) {
        format!("{v:.6e}")
    } else {
        format!("{v:.6}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub title: String,
    pub entries: Vec<(String, Value)>,
}

impl Section {
    fn new(title: &str) -> Section {
        Section { title: title.into(), entries: Vec::new() }
    }

    fn push(&mut self, key: impl Into<String>, v: Value) {
        self.entries.push((key.into(), v));
    }

    fn real(&mut self, key: impl Into<String>, v: f64) {
        self.push(key, Value::Real(v));
    }

    fn int(&mut self, key: impl Into<String>, v: usize) {
        self.push(key, Value::Int(v as u64));
    }

    fn text(&mut self, key: impl Into<String>, v: impl Into<String>) {
        self.push(key, Value::Text(v.into()));
    }

    fn vector(&mut self, key: &str, v: &DVector<f64>, names: &[String]) {
        for (i, x) in v.iter().enumerate() {
            self.real(format!("{key}.{}", names[i]), *x);
        }
    }

    fn matrix(&mut self, key: &str, m: &DMatrix<f64>, names: &[String]) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.real(format!("{key}.{}.{}", names[i], names[j]), m[(i, j)]);
            }
        }
    }
}

/// Ordered sections of named values for one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub estimator: String,
    pub sections: Vec<Section>,
}

impl Report {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.sections
            .iter()
            .flat_map(|s| &s.entries)
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Table => self.to_table(),
            Format::Kv => self.to_kv(),
        }
    }

    pub fn to_kv(&self) -> String {
        let mut out = format!("estimator = {}\n", self.estimator);
        for s in &self.sections {
            for (k, v) in &s.entries {
                let _ = writeln!(out, "{k} = {}", v.exact());
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .sections
            .iter()
            .flat_map(|s| &s.entries)
            .map(|(k, _)| k.chars().count())
            .max()
            .unwrap_or(0);
        let mut out = format!("estimator: {}\n", self.estimator);
        for s in &self.sections {
            let _ = writeln!(out, "\n[{}]", s.title);
            for (k, v) in &s.entries {
                let pad = width - k.chars().count();
                let _ = writeln!(out, "  {k}{}  {}", " ".repeat(pad), v.pretty());
            }
        }
        out
    }
}

/// Render several reports in one document, separated by a blank line.
pub fn render_all(reports: &[Report], format: Format) -> String {
    reports.iter().map(|r| r.render(format)).collect::<Vec<_>>().join("\n")
}

fn weak_iv_section(w: &WeakIvReport) -> Section {
    let mut s = Section::new("weak identification");
    s.real("f_stat", w.f_stat);
    s.push("f_exceeds_16_3", Value::Bool(w.f_exceeds_16_3));
    s.push("f_exceeds_104_7", Value::Bool(w.f_exceeds_104_7));
    s.real("ar_theta0", w.theta0);
    s.real("ar_stat", w.ar_stat);
    s.real("ar_pvalue", w.ar_pvalue);
    s.real("cs_level", w.level);
    s.real("cs_critical_value", w.cs.critical_value);
    s.text("cs_regime", w.cs.regime.as_str());
    s.text("cs_set", w.cs.describe());
    s.push("cs_includes_zero", Value::Bool(w.cs.includes_zero()));
    for (i, r) in w.cs.roots().iter().enumerate() {
        s.real(format!("cs_root.{}", i + 1), *r);
    }
    s
}

struct Common<'a> {
    theta: f64,
    se: f64,
    pi: &'a DVector<f64>,
    delta: &'a DVector<f64>,
    sigma_pi: &'a DMatrix<f64>,
    sigma_delta: &'a DMatrix<f64>,
    z_names: &'a [String],
    weak_denominator: bool,
}

fn estimate_section(c: &Common) -> Section {
    let mut s = Section::new("estimate");
    s.real("theta", c.theta);
    s.real("se_theta", c.se);
    s.vector("pi", c.pi, c.z_names);
    s.vector("delta", c.delta, c.z_names);
    s.matrix("sigma_pi", c.sigma_pi, c.z_names);
    s.matrix("sigma_delta", c.sigma_delta, c.z_names);
    s.push("weak_denominator", Value::Bool(c.weak_denominator));
    s
}

fn sample_section(n_units: usize, n_rows: usize, n_clusters: usize) -> Section {
    let mut s = Section::new("sample");
    s.int("n_units", n_units);
    s.int("n_rows", n_rows);
    s.int("n_clusters", n_clusters);
    s
}

fn fit_section(model_rmse: f64, mse_l: f64, mse_r: f64, mse_m: &[f64], z_names: &[String]) -> Section {
    let mut s = Section::new("nuisance fit");
    s.real("model_rmse", model_rmse);
    s.real("mse_l", mse_l);
    s.real("mse_r", mse_r);
    for (m, name) in mse_m.iter().zip(z_names) {
        s.real(format!("mse_m.{name}"), *m);
    }
    s
}

pub fn dml_report(e: &DmlEstimate, w: &WeakIvReport) -> Report {
    let mut sections = vec![estimate_section(&Common {
        theta: e.theta,
        se: e.se_theta(),
        pi: &e.pi,
        delta: &e.delta,
        sigma_pi: &e.sigma_pi,
        sigma_delta: &e.sigma_delta,
        z_names: &e.z_names,
        weak_denominator: e.weak_denominator,
    })];
    sections.push(weak_iv_section(w));
    let mut sample = sample_section(e.n_units, e.n_rows, e.n_clusters);
    sample.int("folds", e.k);
    sample.text("learner", e.learner.clone());
    sections.push(sample);
    sections.push(fit_section(e.model_rmse, e.mse_l, e.mse_r, &e.mse_m, &e.z_names));

    let mut folds = Section::new("folds");
    for (k, f) in e.folds.iter().enumerate() {
        let i = k + 1;
        folds.int(format!("fold.{i}.n_units"), f.n_units);
        folds.int(format!("fold.{i}.n_rows"), f.n_rows);
        folds.real(format!("fold.{i}.theta"), f.theta);
        folds.vector(&format!("fold.{i}.pi"), &f.pi, &e.z_names);
        folds.vector(&format!("fold.{i}.delta"), &f.delta, &e.z_names);
    }
    sections.push(folds);

    if !e.tuned.is_empty() {
        let mut t = Section::new("tuning");
        for c in &e.tuned {
            let key = format!("tuned.{}.{}", c.fold, c.target);
            t.text(format!("{key}.spec"), c.spec.summary());
            t.real(format!("{key}.cv_mse"), c.cv_mse);
        }
        sections.push(t);
    }
    Report { estimator: "dml".into(), sections }
}

pub fn tsls_report(e: &TslsEstimate, w: &WeakIvReport) -> Report {
    let mut sections = vec![estimate_section(&Common {
        theta: e.theta,
        se: e.se_theta(),
        pi: &e.pi,
        delta: &e.delta,
        sigma_pi: &e.sigma_pi,
        sigma_delta: &e.sigma_delta,
        z_names: &e.z_names,
        weak_denominator: e.weak_denominator,
    })];
    sections.push(weak_iv_section(w));
    let mut sample = sample_section(e.n_units, e.n_rows, e.n_clusters);
    sample.text("controls", if e.controls.is_empty() { "(none)".to_string() } else { e.controls.join(",") });
    sections.push(sample);
    sections.push(fit_section(e.model_rmse, e.mse_l, e.mse_r, &e.mse_m, &e.z_names));
    Report { estimator: "2sls_fd".into(), sections }
}
