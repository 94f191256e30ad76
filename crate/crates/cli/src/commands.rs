//! The three subcommands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use log::info;

use pivdml::dml::{estimate_dml, DmlConfig};
use pivdml::learners::tuning::grid_search_tune;
use pivdml::learners::LearnerSpec;
use pivdml::panel::{first_difference, load_panel, DifferencedSample};
use pivdml::report::{dml_report, render_all, tsls_report, Format};
use pivdml::sim::run_replications;
use pivdml::tsls::{estimate_2sls_fd, Controls};
use pivdml::weak_iv::IvInference;
use pivdml::Error;

use crate::config::{config_hash, DataPlan, EstimatePlan, Runtime, SimulatePlan, TunePlan};
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn log_run<T: serde::Serialize>(command: &str, seed: u64, plan: &T) {
    info!("pivdml {VERSION} {command}: seed={seed} config_hash={}", config_hash(plan));
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // Fails only when the global pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
            f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_differenced(data: &DataPlan) -> Result<DifferencedSample, CliError> {
    let file = File::open(&data.path).map_err(|e| CliError::io(&data.path, e))?;
    let panel = load_panel(std::io::BufReader::new(file), &data.schema())?;
    if panel.dropped_rows > 0 {
        info!("dropped {} rows with missing values", panel.dropped_rows);
    }
    let fd = first_difference(&panel)?;
    if fd.units_without_pairs > 0 {
        info!("{} units have no consecutive pair of periods", fd.units_without_pairs);
    }
    info!("{} differenced rows from {} units", fd.n_rows(), fd.n_units());
    Ok(fd)
}

fn format_of(name: &str) -> Format {
    name.parse().unwrap_or_default()
}

pub fn cmd_estimate(plan: &EstimatePlan, rt: &Runtime) -> Result<(), CliError> {
    log_run("estimate", plan.seed, plan);
    init_threads(rt.threads);
    let fd = load_differenced(&plan.data)?;
    let cfg = DmlConfig {
        folds: plan.folds,
        seed: plan.seed,
        learners: plan.learners(),
    };
    let est = estimate_dml(&fd, &cfg)?;
    if est.weak_denominator {
        info!("weak denominator: rely on the Anderson–Rubin set for inference");
    }
    let mut reports = vec![dml_report(&est, &est.weak_iv(plan.level, plan.theta0)?)];
    if plan.compare_2sls {
        let t = estimate_2sls_fd(&fd, &Controls::All)?;
        reports.push(tsls_report(&t, &t.weak_iv(plan.level, plan.theta0)?));
    }
    write_output(rt.out.as_deref(), &render_all(&reports, format_of(&plan.format)))
}

pub fn cmd_simulate(plan: &SimulatePlan, rt: &Runtime) -> Result<(), CliError> {
    log_run("simulate", plan.seed, plan);
    let report = run_replications(&plan.mc_config(rt.threads)?)?;
    for row in &report.rows {
        if row.n_failed > 0 {
            info!("{}: {} replications failed and were excluded", row.estimator, row.n_failed);
        }
    }
    if let Some(path) = &plan.csv {
        write_output(Some(path), &report.to_csv())?;
    }
    let text = match format_of(&plan.format) {
        Format::Table => report.to_table(),
        Format::Kv => report.to_kv(),
    };
    write_output(rt.out.as_deref(), &text)
}

pub fn cmd_tune(plan: &TunePlan, rt: &Runtime) -> Result<(), CliError> {
    log_run("tune", plan.seed, plan);
    init_threads(rt.threads);
    let fd = load_differenced(&plan.data)?;
    let y: Vec<f64> = match plan.target.as_str() {
        "l" => fd.ytilde.clone(),
        "r" => fd.dtilde.clone(),
        _ => {
            let j = match &plan.instrument {
                Some(name) => fd
                    .z_names
                    .iter()
                    .position(|z| z == name)
                    .ok_or_else(|| Error::MissingColumn(name.clone()))?,
                None => 0,
            };
            fd.ztilde.column(j).iter().copied().collect()
        }
    };
    let result = grid_search_tune(
        &plan.learner,
        &fd.xpair,
        &y,
        plan.candidates,
        plan.evaluations,
        plan.cv_folds,
        plan.seed,
    )?;
    for (i, (spec, mse)) in result.evaluations.iter().enumerate() {
        info!("candidate {}: {} cv_mse={mse:.6}", i + 1, spec.summary());
    }
    info!("selected: {} cv_mse={:.6}", result.best.summary(), result.best_cv_mse);

    let mut doc: BTreeMap<String, LearnerSpec> = BTreeMap::new();
    doc.insert(format!("learner_{}", plan.target), result.best.clone());
    let body = toml::to_string(&doc).map_err(|e| CliError::Config(e.to_string()))?;
    let text = format!("# cv_mse = {:e}\n{body}", result.best_cv_mse);
    write_output(rt.out.as_deref(), &text)
}
