//! Weak-identification diagnostics: first-stage F, Anderson–Rubin test and
//! the Anderson–Rubin confidence set obtained by test inversion.

use nalgebra::{DMatrix, DVector};

use crate::chisq::{chi2_quantile, chi2_sf};
use crate::linalg::{bilinear, quad_form, spd_inverse};
use crate::{Error, Result};

/// Conventional first-stage F thresholds.
pub const F_THRESHOLD_LOW: f64 = 16.3;
pub const F_THRESHOLD_HIGH: f64 = 104.7;

/// Covariance of the reduced-form contrast `δ̂ − π̂θ0`.
#[derive(Debug, Clone, PartialEq)]
pub enum ArVariance {
    /// A single matrix used for every `θ0`.
    Fixed(DMatrix<f64>),
    /// `Σ(θ0) = yy − θ0(yd + yd') + θ0²·dd`, the variance of the score of
    /// `δ − πθ0` with the null imposed. At `θ0 = 0` it equals `yy`.
    NullImposed {
        yy: DMatrix<f64>,
        yd: DMatrix<f64>,
        dd: DMatrix<f64>,
    },
}

impl ArVariance {
    pub fn at(&self, theta0: f64) -> DMatrix<f64> {
        match self {
            ArVariance::Fixed(s) => s.clone(),
            ArVariance::NullImposed { yy, yd, dd } => {
                yy - (yd + yd.transpose()) * theta0 + dd * (theta0 * theta0)
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ArVariance::Fixed(s) => s.nrows(),
            ArVariance::NullImposed { yy, .. } => yy.nrows(),
        }
    }

    /// Multiply every block by `c`.
    pub fn scaled(&self, c: f64) -> ArVariance {
        match self {
            ArVariance::Fixed(s) => ArVariance::Fixed(s * c),
            ArVariance::NullImposed { yy, yd, dd } => ArVariance::NullImposed {
                yy: yy * c,
                yd: yd * c,
                dd: dd * c,
            },
        }
    }
}

/// First-stage Wald statistic `π̂'Σ̂ππ⁻¹π̂ / r`.
pub fn f_statistic(pi: &DVector<f64>, sigma_pi: &DMatrix<f64>) -> Result<f64> {
    check_dims(pi.len(), sigma_pi, "sigma_pi")?;
    let w = spd_inverse(sigma_pi, "first-stage variance")?;
    Ok((quad_form(&w, pi) / pi.len() as f64).max(0.0))
}

/// Anderson–Rubin statistic at `theta0` and its chi-square(r) p-value.
pub fn ar_statistic(
    delta: &DVector<f64>,
    pi: &DVector<f64>,
    var: &ArVariance,
    theta0: f64,
) -> Result<(f64, f64)> {
    let r = delta.len();
    if pi.len() != r || var.dim() != r {
        return Err(Error::Dimension("delta, pi and variance must share dimension r".into()));
    }
    let w = spd_inverse(&var.at(theta0), "reduced-form variance")?;
    let contrast = delta - pi * theta0;
    let stat = quad_form(&w, &contrast).max(0.0);
    Ok((stat, chi2_sf(stat, r as f64)))
}

fn check_dims(r: usize, m: &DMatrix<f64>, what: &str) -> Result<()> {
    if r == 0 || m.nrows() != r || m.ncols() != r {
        return Err(Error::Dimension(format!("{what} must be {r}×{r}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsRegime {
    Bounded,
    Disjoint,
    RealLine,
    Empty,
    HalfLine,
    /// More than two pieces; only possible with several instruments.
    Union,
}

impl CsRegime {
    pub fn as_str(&self) -> &'static str {
        match self {
            CsRegime::Bounded => "bounded",
            CsRegime::Disjoint => "disjoint",
            CsRegime::RealLine => "real_line",
            CsRegime::Empty => "empty",
            CsRegime::HalfLine => "half_line",
            CsRegime::Union => "union",
        }
    }

    pub fn is_unbounded(&self) -> bool {
        matches!(self, CsRegime::Disjoint | CsRegime::RealLine | CsRegime::HalfLine)
    }
}

impl std::fmt::Display for CsRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Set of `θ` not rejected by the Anderson–Rubin test, as closed intervals
/// (infinite ends are `±∞`).
#[derive(Debug, Clone, PartialEq)]
pub struct ArConfidenceSet {
    pub regime: CsRegime,
    pub intervals: Vec<(f64, f64)>,
    pub level: f64,
    pub critical_value: f64,
}

impl ArConfidenceSet {
    pub fn contains(&self, theta: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= theta && theta <= hi)
    }

    pub fn includes_zero(&self) -> bool {
        self.contains(0.0)
    }

    /// Finite interval endpoints in increasing order.
    pub fn roots(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .intervals
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .filter(|v| v.is_finite())
            .collect();
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }

    /// Human-readable set notation.
    pub fn describe(&self) -> String {
        if self.intervals.is_empty() {
            return "{}".into();
        }
        let fmt = |v: f64| {
            if v == f64::INFINITY {
                "+inf".to_string()
            } else if v == f64::NEG_INFINITY {
                "-inf".to_string()
            } else {
                format!("{v:.6}")
            }
        };
        self.intervals
            .iter()
            .map(|&(a, b)| {
                let l = if a.is_finite() { "[" } else { "(" };
                let r = if b.is_finite() { "]" } else { ")" };
                format!("{l}{}, {}{r}", fmt(a), fmt(b))
            })
            .collect::<Vec<_>>()
            .join(" U ")
    }
}

/// Relative tolerance for treating the leading coefficient as zero.
pub const QUAD_ZERO_RTOL: f64 = 1e-12;

/// Solve `a·θ² − 2b·θ + c0 ≤ 0` and classify the solution set.
pub fn solve_quadratic_set(a: f64, b: f64, c0: f64, scale: f64) -> (CsRegime, Vec<(f64, f64)>) {
    let inf = f64::INFINITY;
    if a.abs() < QUAD_ZERO_RTOL * scale.max(1.0) {
        if b.abs() < QUAD_ZERO_RTOL * scale.max(1.0) {
            return if c0 <= 0.0 {
                (CsRegime::RealLine, vec![(-inf, inf)])
            } else {
                (CsRegime::Empty, vec![])
            };
        }
        let x = c0 / (2.0 * b);
        return if b > 0.0 {
            (CsRegime::HalfLine, vec![(x, inf)])
        } else {
            (CsRegime::HalfLine, vec![(-inf, x)])
        };
    }
    let disc = b * b - a * c0;
    if disc < 0.0 {
        return if a > 0.0 {
            (CsRegime::Empty, vec![])
        } else {
            (CsRegime::RealLine, vec![(-inf, inf)])
        };
    }
    let s = disc.sqrt();
    let qq = b + if b >= 0.0 { s } else { -s };
    let (r1, r2) = if qq == 0.0 { (0.0, 0.0) } else { (qq / a, c0 / qq) };
    let (x, y) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    if a > 0.0 {
        (CsRegime::Bounded, vec![(x, y)])
    } else if x < y {
        (CsRegime::Disjoint, vec![(-inf, x), (y, inf)])
    } else {
        (CsRegime::RealLine, vec![(-inf, inf)])
    }
}

/// Invert the Anderson–Rubin test at confidence `level`.
pub fn ar_confidence_set(
    delta: &DVector<f64>,
    pi: &DVector<f64>,
    var: &ArVariance,
    level: f64,
) -> Result<ArConfidenceSet> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    let r = delta.len();
    if pi.len() != r || var.dim() != r || r == 0 {
        return Err(Error::Dimension("delta, pi and variance must share dimension r".into()));
    }
    let q = chi2_quantile(level, r as f64);
    let (regime, intervals) = match var {
        ArVariance::Fixed(s) => {
            let w = spd_inverse(s, "reduced-form variance")?;
            let a = quad_form(&w, pi);
            let b = bilinear(pi, &w, delta);
            let c = quad_form(&w, delta);
            solve_quadratic_set(a, b, c - q, b.abs().max(c.abs()))
        }
        ArVariance::NullImposed { yy, yd, dd } if r == 1 => {
            let (p, d) = (pi[0], delta[0]);
            let a = p * p - q * dd[(0, 0)];
            let b = p * d - q * yd[(0, 0)];
            let c0 = d * d - q * yy[(0, 0)];
            solve_quadratic_set(a, b, c0, b.abs().max(c0.abs()))
        }
        ArVariance::NullImposed { yy, yd, dd } => {
            let intervals = invert_general(delta, pi, yy, yd, dd, q)?;
            (classify(&intervals), intervals)
        }
    };
    Ok(ArConfidenceSet {
        regime,
        intervals,
        level,
        critical_value: q,
    })
}

fn classify(iv: &[(f64, f64)]) -> CsRegime {
    match iv {
        [] => CsRegime::Empty,
        [(a, b)] if a.is_infinite() && b.is_infinite() => CsRegime::RealLine,
        [(a, b)] if a.is_finite() && b.is_finite() => CsRegime::Bounded,
        [_] => CsRegime::HalfLine,
        [(a, _), (_, d)] if a.is_infinite() && d.is_infinite() => CsRegime::Disjoint,
        _ => CsRegime::Union,
    }
}

/// Several instruments with a null-imposed variance: the boundary solves
/// `det(qΣ(θ) − δ(θ)δ(θ)') = 0`, a quadratic eigenvalue problem in `θ`.
fn invert_general(
    delta: &DVector<f64>,
    pi: &DVector<f64>,
    yy: &DMatrix<f64>,
    yd: &DMatrix<f64>,
    dd: &DMatrix<f64>,
    q: f64,
) -> Result<Vec<(f64, f64)>> {
    let r = delta.len();
    let m0 = yy * q - delta * delta.transpose();
    let m1 = -(yd + yd.transpose()) * q + delta * pi.transpose() + pi * delta.transpose();
    let m2 = dd * q - pi * pi.transpose();

    let rcond = |m: &DMatrix<f64>| {
        let sv = m.singular_values();
        let max = sv.max();
        if max > 0.0 { sv.min() / max } else { 0.0 }
    };
    let reversed = rcond(&m0) > rcond(&m2);
    let (lead, mid, tail) = if reversed { (&m0, &m1, &m2) } else { (&m2, &m1, &m0) };
    let lead_inv = lead
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("AR boundary pencil".into()))?;
    let mut comp = DMatrix::<f64>::zeros(2 * r, 2 * r);
    comp.view_mut((0, r), (r, r)).fill_with_identity();
    comp.view_mut((r, 0), (r, r)).copy_from(&(-&lead_inv * tail));
    comp.view_mut((r, r), (r, r)).copy_from(&(-&lead_inv * mid));
    let mut roots: Vec<f64> = comp
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-8 * (1.0 + z.re.abs()))
        .filter_map(|z| {
            if reversed {
                (z.re != 0.0).then(|| 1.0 / z.re)
            } else {
                Some(z.re)
            }
        })
        .filter(|v| v.is_finite())
        .collect();
    roots.sort_by(|a, b| a.total_cmp(b));
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));

    let var = ArVariance::NullImposed {
        yy: yy.clone(),
        yd: yd.clone(),
        dd: dd.clone(),
    };
    let inside = |t: f64| -> Result<bool> { Ok(ar_statistic(delta, pi, &var, t)?.0 <= q) };

    let mut pts = vec![f64::NEG_INFINITY];
    pts.extend(&roots);
    pts.push(f64::INFINITY);
    let mut out: Vec<(f64, f64)> = Vec::new();
    for w in pts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let probe = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (false, true) => hi - 1.0 - hi.abs(),
            (true, false) => lo + 1.0 + lo.abs(),
            (false, false) => 0.0,
        };
        if inside(probe)? {
            match out.last_mut() {
                Some(last) if last.1 == lo => last.1 = hi,
                _ => out.push((lo, hi)),
            }
        }
    }
    Ok(out)
}

/// Diagnostics rendered alongside a point estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakIvReport {
    pub f_stat: f64,
    pub f_exceeds_16_3: bool,
    pub f_exceeds_104_7: bool,
    pub theta0: f64,
    pub ar_stat: f64,
    pub ar_pvalue: f64,
    pub cs: ArConfidenceSet,
    pub level: f64,
}

pub fn weak_iv_report(
    delta: &DVector<f64>,
    pi: &DVector<f64>,
    sigma_pi: &DMatrix<f64>,
    var: &ArVariance,
    level: f64,
    theta0: f64,
) -> Result<WeakIvReport> {
    let f_stat = f_statistic(pi, sigma_pi)?;
    let (ar_stat, ar_pvalue) = ar_statistic(delta, pi, var, theta0)?;
    let cs = ar_confidence_set(delta, pi, var, level)?;
    Ok(WeakIvReport {
        f_stat,
        f_exceeds_16_3: f_stat > F_THRESHOLD_LOW,
        f_exceeds_104_7: f_stat > F_THRESHOLD_HIGH,
        theta0,
        ar_stat,
        ar_pvalue,
        cs,
        level,
    })
}

/// Estimates that carry what the weak-identification diagnostics need.
pub trait IvInference {
    fn pi(&self) -> &DVector<f64>;
    fn delta(&self) -> &DVector<f64>;
    fn sigma_pi(&self) -> &DMatrix<f64>;
    fn ar_variance(&self) -> &ArVariance;

    fn weak_iv(&self, level: f64, theta0: f64) -> Result<WeakIvReport> {
        weak_iv_report(self.delta(), self.pi(), self.sigma_pi(), self.ar_variance(), level, theta0)
    }
}
