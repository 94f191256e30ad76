//! Cross-fitted estimates checked against independently coded oracles.

use nalgebra::{DMatrix, DVector};
use pivdml::dml::{estimate_from_nuisances, learn_nuisances, NuisanceLearners};
use pivdml::learners::LearnerSpec;
use pivdml::panel::{block_kfold, first_difference, DifferencedSample, FoldAssignment};
use pivdml::sim::{dgp_generate, run_replications, DgpConfig, McConfig, McEstimator};

/// Least squares through normal equations and a Cholesky factor.
fn ols_predict(x_train: &DMatrix<f64>, y_train: &[f64], x_test: &DMatrix<f64>) -> Vec<f64> {
    let xtx = x_train.transpose() * x_train;
    let xty = x_train.transpose() * DVector::from_column_slice(y_train);
    let b = xtx.cholesky().expect("full rank design").solve(&xty);
    (x_test * b).iter().copied().collect()
}

fn rows_of(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Out-of-fold least-squares predictions of `y` on `design`.
fn cross_fit(design: &DMatrix<f64>, y: &[f64], fd: &DifferencedSample, folds: &FoldAssignment) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for (k, test) in folds.rows(fd).iter().enumerate() {
        let train = folds.complement_rows(fd, k);
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let pred = ols_predict(&rows_of(design, &train), &ytr, &rows_of(design, test));
        for (p, &i) in pred.iter().zip(test) {
            out[i] = *p;
        }
    }
    out
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

#[test]
fn linear_cross_fitting_matches_partialling_out_oracle() {
    let cfg = DgpConfig { p: 5, seed: 17, ..DgpConfig::strong(200) };
    let fd = first_difference(&dgp_generate(&cfg).unwrap().data).unwrap();
    let folds = block_kfold(fd.n_units(), 2, 5).unwrap();
    let nuis = learn_nuisances(&fd, &folds, &NuisanceLearners::same(LearnerSpec::linear()), 5).unwrap();
    let est = estimate_from_nuisances(&fd, &folds, &nuis, "linear").unwrap();

    let w = with_intercept(&fd.xpair);
    let z: Vec<f64> = fd.ztilde.column(0).iter().copied().collect();
    let lhat = cross_fit(&w, &fd.ytilde, &fd, &folds);
    let rhat = cross_fit(&w, &fd.dtilde, &fd, &folds);
    let mhat = cross_fit(&w, &z, &fd, &folds);

    let mut thetas = Vec::new();
    for (k, rows) in folds.rows(&fd).iter().enumerate() {
        let (mut vv, mut ve, mut vy) = (0.0, 0.0, 0.0);
        for &i in rows {
            let v = z[i] - mhat[i];
            vv += v * v;
            ve += v * (fd.dtilde[i] - rhat[i]);
            vy += v * (fd.ytilde[i] - lhat[i]);
        }
        let f = &est.folds[k];
        assert!((f.pi[0] - ve / vv).abs() <= 1e-10 * (ve / vv).abs().max(1.0));
        assert!((f.delta[0] - vy / vv).abs() <= 1e-10 * (vy / vv).abs().max(1.0));
        assert!((f.theta - vy / ve).abs() <= 1e-10);
        thetas.push(vy / ve);
    }
    let oracle = thetas.iter().sum::<f64>() / thetas.len() as f64;
    assert!((est.theta - oracle).abs() <= 1e-10, "{} vs {oracle}", est.theta);
}

#[test]
fn lasso_instrument_fit_is_close_to_true_basis_oracle() {
    let cfg = DgpConfig { seed: 3, ..DgpConfig::strong(500) };
    let sim = dgp_generate(&cfg).unwrap();
    let fd = first_difference(&sim.data).unwrap();
    let folds = block_kfold(fd.n_units(), 3, 11).unwrap();
    let nuis = learn_nuisances(&fd, &folds, &NuisanceLearners::same(LearnerSpec::lasso()), 11).unwrap();

    // The instrument's nuisance depends on X1 and X3 only, through x, x and max(x, 0).
    let col = |name: &str| fd.xpair_names.iter().position(|c| c == name).unwrap();
    let (x1, x3, x1l, x3l) = (col("x1"), col("x3"), col("x1_lag"), col("x3_lag"));
    let basis = DMatrix::from_fn(fd.n_rows(), 6, |i, j| {
        let x = &fd.xpair;
        match j {
            0 => x[(i, x1)],
            1 => x[(i, x3)],
            2 => x[(i, x1)].max(0.0),
            3 => x[(i, x1l)],
            4 => x[(i, x3l)],
            _ => x[(i, x1l)].max(0.0),
        }
    });
    let z: Vec<f64> = fd.ztilde.column(0).iter().copied().collect();
    let mhat = cross_fit(&with_intercept(&basis), &z, &fd, &folds);
    let oracle_mse = z.iter().zip(&mhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.len() as f64;
    let ratio = nuis.mse_m[0] / oracle_mse;
    assert!((0.8..=1.2).contains(&ratio), "lasso {} oracle {oracle_mse} ratio {ratio}", nuis.mse_m[0]);
}

#[test]
fn linear_learner_standard_errors_track_sampling_spread() {
    let cfg = McConfig {
        dgp: DgpConfig { seed: 500, ..DgpConfig::strong(1000) },
        replications: 100,
        estimators: vec![McEstimator::DmlLinear],
        ..Default::default()
    };
    let report = run_replications(&cfg).unwrap();
    let row = report.row("dml-linear").unwrap();
    assert_eq!(row.n_ok, 100);
    assert!((0.7..=1.4).contains(&row.se_sd), "se/sd = {}", row.se_sd);
}
