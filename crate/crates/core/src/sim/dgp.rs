//! Simulated panel with nonlinear confounding through the covariates.
//!
//! For unit `i` and period `t`:
//!
//! ```text
//! Γ_i ~ N(3, 9),  A_i ~ N(0, 1),  α_i = ρΓ_i + √(1−ρ²)A_i,  γ_i ~ N(0, 25)
//! X_itj = Γ_i + N(0, 1),  j = 1..p
//! f(X) = a·X₁ + b·X₃ + c·X₁·1{X₁ > 0}
//! Z = f(X) + γ_i + V
//! D = πZ + f(X) + 0.5α_i + R
//! Y = θD + f(X) + α_i + U
//! ```
//!
//! with `(U, R, V)` normal, unit variances for `U` and `R`, `Cov(U, R) = σ_ur`,
//! `Var(V) = 0.25` and `V` independent of `(U, R)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::panel::{PanelDataset, PanelParts};
use crate::{Error, Result};

pub const PI_STRONG: f64 = 0.8;
pub const PI_WEAK: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_units: usize,
    pub periods: usize,
    pub p: usize,
    pub theta: f64,
    pub pi: f64,
    pub rho: f64,
    pub sigma_ur: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub var_v: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_units: 100,
            periods: 10,
            p: 30,
            theta: 0.5,
            pi: PI_STRONG,
            rho: 0.9,
            sigma_ur: 0.6,
            a: 0.5,
            b: 0.5,
            c: 0.5,
            var_v: 0.25,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn strong(n_units: usize) -> Self {
        DgpConfig { n_units, ..Default::default() }
    }

    pub fn weak(n_units: usize) -> Self {
        DgpConfig {
            n_units,
            pi: PI_WEAK,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods < 2 {
            return Err(Error::InvalidArgument("T ≥ 2 periods required".into()));
        }
        if self.n_units == 0 {
            return Err(Error::InvalidArgument("at least one unit required".into()));
        }
        if self.p < 3 {
            return Err(Error::InvalidArgument("at least three covariates required".into()));
        }
        if !(self.rho.abs() <= 1.0) || !(self.sigma_ur.abs() <= 1.0) || !(self.var_v >= 0.0) {
            return Err(Error::InvalidArgument("rho and sigma_ur must lie in [−1, 1], var_v ≥ 0".into()));
        }
        Ok(())
    }

    /// Nuisance `f(X)` from a covariate row.
    pub fn f(&self, x1: f64, x3: f64) -> f64 {
        self.a * x1 + self.b * x3 + self.c * x1 * if x1 > 0.0 { 1.0 } else { 0.0 }
    }
}

/// A draw together with the latent quantities, for moment checks.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub data: PanelDataset,
    /// Per unit.
    pub big_gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Per row, in unit-major order.
    pub u: Vec<f64>,
    pub r: Vec<f64>,
    pub v: Vec<f64>,
}

/// Draw one panel. Deterministic in `cfg.seed`.
pub fn dgp_generate(cfg: &DgpConfig) -> Result<SimulatedPanel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, t, p) = (cfg.n_units, cfg.periods, cfg.p);
    let rows = n * t;
    let mut norm = || -> f64 { rng.sample(StandardNormal) };

    let mut parts = PanelParts {
        unit: Vec::with_capacity(rows),
        time: Vec::with_capacity(rows),
        y: Vec::with_capacity(rows),
        d: Vec::with_capacity(rows),
        z: vec![Vec::with_capacity(rows)],
        x: vec![Vec::with_capacity(rows); p],
        cluster: None,
        z_names: vec!["z".into()],
        x_names: (1..=p).map(|j| format!("x{j}")).collect(),
    };
    let mut out_u = Vec::with_capacity(rows);
    let mut out_r = Vec::with_capacity(rows);
    let mut out_v = Vec::with_capacity(rows);
    let mut big_gamma = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut gamma = Vec::with_capacity(n);
    let r_scale = (1.0 - cfg.sigma_ur * cfg.sigma_ur).sqrt();
    let a_scale = (1.0 - cfg.rho * cfg.rho).sqrt();
    let v_scale = cfg.var_v.sqrt();

    for i in 0..n {
        let g = 3.0 + 3.0 * norm();
        let al = cfg.rho * g + a_scale * norm();
        let ga = 5.0 * norm();
        big_gamma.push(g);
        alpha.push(al);
        gamma.push(ga);
        for s in 0..t {
            for col in parts.x.iter_mut() {
                col.push(g + norm());
            }
            let e1 = norm();
            let e2 = norm();
            let e3 = norm();
            let u = e1;
            let r = cfg.sigma_ur * e1 + r_scale * e2;
            let v = v_scale * e3;
            let row = parts.x[0].len() - 1;
            let f = cfg.f(parts.x[0][row], parts.x[2][row]);
            let z = f + ga + v;
            let d = cfg.pi * z + f + 0.5 * al + r;
            let y = cfg.theta * d + f + al + u;
            parts.unit.push((i + 1).to_string());
            parts.time.push(s as i64 + 1);
            parts.y.push(y);
            parts.d.push(d);
            parts.z[0].push(z);
            out_u.push(u);
            out_r.push(r);
            out_v.push(v);
        }
    }
    Ok(SimulatedPanel {
        data: PanelDataset::new(parts)?,
        big_gamma,
        alpha,
        gamma,
        u: out_u,
        r: out_r,
        v: out_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mean, sample_variance};

    #[test]
    fn shape_and_determinism() {
        let cfg = DgpConfig { n_units: 7, periods: 4, seed: 3, ..Default::default() };
        let a = dgp_generate(&cfg).unwrap();
        assert_eq!(a.data.n_rows(), 28);
        assert_eq!(a.data.x.ncols(), 30);
        assert_eq!(a.data.z.ncols(), 1);
        let b = dgp_generate(&cfg).unwrap();
        assert_eq!(a.data.y, b.data.y);
        assert_eq!(a.data.x, b.data.x);
        let c = dgp_generate(&DgpConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.data.y, c.data.y);
    }

    #[test]
    fn structural_equations_hold() {
        let cfg = DgpConfig { n_units: 5, periods: 3, seed: 1, ..Default::default() };
        let s = dgp_generate(&cfg).unwrap();
        let d = &s.data;
        for i in 0..d.n_rows() {
            let unit = i / 3;
            let f = cfg.f(d.x[(i, 0)], d.x[(i, 2)]);
            assert!((d.z[(i, 0)] - (f + s.gamma[unit] + s.v[i])).abs() < 1e-12);
            assert!((d.y[i] - (0.5 * d.d[i] + f + s.alpha[unit] + s.u[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_on_a_large_draw() {
        let cfg = DgpConfig { n_units: 25_000, periods: 2, seed: 11, ..Default::default() };
        let s = dgp_generate(&cfg).unwrap();
        let n = s.u.len() as f64;
        let mu = mean(&s.u);
        let mr = mean(&s.r);
        let cov = s.u.iter().zip(&s.r).map(|(a, b)| (a - mu) * (b - mr)).sum::<f64>() / (n - 1.0);
        let corr = cov / (sample_variance(&s.u) * sample_variance(&s.r)).sqrt();
        assert!((corr - 0.6).abs() < 0.02, "corr {corr}");
        assert!((sample_variance(&s.v) - 0.25).abs() < 0.01);
        assert!((mean(&s.big_gamma) - 3.0).abs() < 0.05);
        assert!((sample_variance(&s.gamma) - 25.0).abs() < 1.0);
    }
}
