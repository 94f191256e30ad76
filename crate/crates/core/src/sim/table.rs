//! Monte Carlo summary metrics and their text and CSV renderings.

use super::replications::ReplicationOutcome;
use crate::linalg::{mean, sample_sd};
use crate::weak_iv::{CsRegime, F_THRESHOLD_HIGH, F_THRESHOLD_LOW};

/// Metrics for one estimator across replications.
#[derive(Debug, Clone, PartialEq)]
pub struct McRow {
    pub estimator: String,
    pub n_ok: usize,
    pub n_failed: usize,
    /// `mean(θ̂) − θ0`.
    pub bias: f64,
    /// `√mean((θ̂ − θ0)²)`.
    pub rmse: f64,
    /// `mean(SE) / sd(θ̂)`.
    pub se_sd: f64,
    pub rmse_l: f64,
    pub rmse_r: f64,
    pub rmse_m: f64,
    pub mean_f: f64,
    pub freq_f_low: f64,
    pub freq_f_high: f64,
    pub freq_ar_reject: f64,
    pub freq_bounded: f64,
    pub freq_real_line: f64,
    pub freq_disjoint: f64,
    pub freq_includes_zero: f64,
}

fn freq(outcomes: &[ReplicationOutcome], pred: impl Fn(&ReplicationOutcome) -> bool) -> f64 {
    if outcomes.is_empty() {
        return f64::NAN;
    }
    outcomes.iter().filter(|o| pred(o)).count() as f64 / outcomes.len() as f64
}

impl McRow {
    pub fn from_outcomes(name: &str, theta0: f64, outcomes: &[ReplicationOutcome], failed: usize) -> McRow {
        let thetas: Vec<f64> = outcomes.iter().map(|o| o.theta).collect();
        let col = |f: fn(&ReplicationOutcome) -> f64| mean(&outcomes.iter().map(f).collect::<Vec<_>>());
        let mse = mean(&thetas.iter().map(|t| (t - theta0).powi(2)).collect::<Vec<_>>());
        McRow {
            estimator: name.to_string(),
            n_ok: outcomes.len(),
            n_failed: failed,
            bias: mean(&thetas) - theta0,
            rmse: mse.sqrt(),
            se_sd: col(|o| o.se) / sample_sd(&thetas),
            rmse_l: col(|o| o.rmse_l),
            rmse_r: col(|o| o.rmse_r),
            rmse_m: col(|o| o.rmse_m),
            mean_f: col(|o| o.f_stat),
            freq_f_low: freq(outcomes, |o| o.f_stat > F_THRESHOLD_LOW),
            freq_f_high: freq(outcomes, |o| o.f_stat > F_THRESHOLD_HIGH),
            freq_ar_reject: freq(outcomes, |o| o.ar_pvalue < 0.05),
            freq_bounded: freq(outcomes, |o| o.regime == CsRegime::Bounded),
            freq_real_line: freq(outcomes, |o| o.regime == CsRegime::RealLine),
            freq_disjoint: freq(outcomes, |o| o.regime == CsRegime::Disjoint),
            freq_includes_zero: freq(outcomes, |o| o.includes_zero),
        }
    }
}

/// Summary of a Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct McReport {
    pub design: String,
    pub n_units: usize,
    pub periods: usize,
    pub replications: usize,
    pub folds: usize,
    pub seed: u64,
    pub level: f64,
    pub theta0: f64,
    pub rows: Vec<McRow>,
}

const COLUMNS: [&str; 18] = [
    "estimator",
    "ok",
    "failed",
    "bias",
    "rmse",
    "se_sd",
    "rmse_l",
    "rmse_r",
    "rmse_m",
    "mean_f",
    "f_gt_16.3",
    "f_gt_104.7",
    "ar_p_lt_0.05",
    "bounded",
    "real_line",
    "disjoint",
    "includes_0",
    "n",
];

impl McReport {
    pub fn row(&self, estimator: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    fn cells(&self, r: &McRow, digits: usize) -> Vec<String> {
        let f = |v: f64| format!("{v:.digits$}");
        // The text table keeps one decimal for F and two for frequencies.
        let (md, fd) = if digits <= 3 { (1, 2) } else { (digits, digits) };
        let g = |v: f64| format!("{v:.fd$}");
        vec![
            r.estimator.clone(),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
            f(r.bias),
            f(r.rmse),
            f(r.se_sd),
            f(r.rmse_l),
            f(r.rmse_r),
            f(r.rmse_m),
            format!("{:.md$}", r.mean_f),
            g(r.freq_f_low),
            g(r.freq_f_high),
            g(r.freq_ar_reject),
            g(r.freq_bounded),
            g(r.freq_real_line),
            g(r.freq_disjoint),
            g(r.freq_includes_zero),
            self.n_units.to_string(),
        ]
    }

    pub fn header_line(&self) -> String {
        format!(
            "# design={} N={} T={} R={} K={} seed={} level={} theta0={}",
            self.design, self.n_units, self.periods, self.replications, self.folds, self.seed, self.level, self.theta0
        )
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut grid: Vec<Vec<String>> = vec![COLUMNS.iter().map(|s| s.to_string()).collect()];
        grid.extend(self.rows.iter().map(|r| self.cells(r, 3)));
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|j| grid.iter().map(|row| row[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = self.header_line();
        out.push('\n');
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// `key = value` lines, one per metric, keyed by estimator.
    pub fn to_kv(&self) -> String {
        let mut out = format!(
            "design = {}\nn_units = {}\nperiods = {}\nreplications = {}\nfolds = {}\nseed = {}\nlevel = {}\ntheta0 = {}\n",
            self.design, self.n_units, self.periods, self.replications, self.folds, self.seed, self.level, self.theta0
        );
        for r in &self.rows {
            let cells = self.cells(r, 6);
            for (name, v) in COLUMNS.iter().zip(&cells).skip(1).take(COLUMNS.len() - 2) {
                out.push_str(&format!("{}.{name} = {v}\n", r.estimator));
            }
        }
        out
    }

    /// Comma-separated values with a header row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        for r in &self.rows {
            w.write_record(self.cells(r, 6)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
    }
}
