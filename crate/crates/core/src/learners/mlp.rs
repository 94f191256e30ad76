//! Single-hidden-layer perceptron with logistic units, a linear output and
//! weight decay, trained by limited-memory BFGS.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpParams {
    pub size: usize,
    pub decay: f64,
    pub maxit: usize,
    /// Largest admissible number of weights.
    pub max_weights: usize,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            size: 5,
            decay: 0.1,
            maxit: 100,
            max_weights: 2000,
        }
    }
}

/// Number of weights for `p` inputs and `size` hidden units, biases included.
pub fn n_weights(p: usize, size: usize) -> usize {
    size * (p + 1) + size + 1
}

/// `Σ (ŷ − y)² + decay·‖w‖²` on standardized data.
///
/// Weight layout: for each hidden unit its bias then its `p` input weights,
/// then the output bias and the `size` output weights.
pub struct PenalizedLoss<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    size: usize,
    decay: f64,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

impl<'a> PenalizedLoss<'a> {
    pub fn new(x: &'a DMatrix<f64>, y: &'a [f64], size: usize, decay: f64) -> Self {
        PenalizedLoss { x, y, size, decay }
    }

    pub fn n_params(&self) -> usize {
        n_weights(self.x.ncols(), self.size)
    }

    fn hidden(&self, w: &[f64]) -> DMatrix<f64> {
        let (n, p) = self.x.shape();
        let w1 = DMatrix::from_fn(p, self.size, |j, h| w[h * (p + 1) + 1 + j]);
        let mut a = self.x * w1;
        for h in 0..self.size {
            let b = w[h * (p + 1)];
            for i in 0..n {
                a[(i, h)] = sigmoid(a[(i, h)] + b);
            }
        }
        a
    }

    fn output(&self, w: &[f64], s: &DMatrix<f64>) -> DVector<f64> {
        let o = self.size * (self.x.ncols() + 1);
        let w2 = DVector::from_row_slice(&w[o + 1..o + 1 + self.size]);
        let mut out = s * w2;
        out.add_scalar_mut(w[o]);
        out
    }

    pub fn predict(&self, w: &[f64]) -> Vec<f64> {
        let s = self.hidden(w);
        self.output(w, &s).iter().cloned().collect()
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let pred = self.predict(w);
        let sse: f64 = pred.iter().zip(self.y).map(|(a, b)| (a - b) * (a - b)).sum();
        sse + self.decay * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Loss and its gradient by backpropagation.
    pub fn value_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let (n, p) = self.x.shape();
        let size = self.size;
        let o = size * (p + 1);
        let s = self.hidden(w);
        let pred = self.output(w, &s);
        let e = DVector::from_iterator(n, pred.iter().zip(self.y).map(|(a, b)| 2.0 * (a - b)));
        let sse: f64 = e.iter().map(|v| v * v).sum::<f64>() / 4.0;
        let mut g = vec![0.0; w.len()];
        g[o] = e.sum();
        let gw2 = s.transpose() * &e;
        // δ_ih = e_i · w2_h · s_ih (1 − s_ih)
        let mut delta = s.clone();
        for h in 0..size {
            let w2h = w[o + 1 + h];
            g[o + 1 + h] = gw2[h];
            for i in 0..n {
                let sv = s[(i, h)];
                delta[(i, h)] = e[i] * w2h * sv * (1.0 - sv);
            }
        }
        let gw1 = self.x.transpose() * &delta;
        for h in 0..size {
            g[h * (p + 1)] = delta.column(h).sum();
            for j in 0..p {
                g[h * (p + 1) + 1 + j] = gw1[(j, h)];
            }
        }
        let mut pen = 0.0;
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi += 2.0 * self.decay * wi;
            pen += wi * wi;
        }
        (sse + self.decay * pen, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    weights: Vec<f64>,
    size: usize,
    /// Set when the training target was constant.
    constant: Option<f64>,
    pub final_loss: f64,
    pub iterations: usize,
    pub n_features: usize,
}

impl MlpModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        assert_eq!(x.ncols(), self.n_features, "feature dimension mismatch");
        if let Some(c) = self.constant {
            return vec![c; x.nrows()];
        }
        let xs = standardize_with(x, &self.x_mean, &self.x_scale);
        let loss = PenalizedLoss::new(&xs, &[], self.size, 0.0);
        loss.predict(&self.weights)
            .into_iter()
            .map(|v| self.y_mean + self.y_scale * v)
            .collect()
    }
}

fn standardize_with(x: &DMatrix<f64>, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - mean[j]) / scale[j])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L-BFGS with backtracking (halving) Armijo line search.
/// Returns the final weights, loss and iteration count.
fn lbfgs(loss: &PenalizedLoss, mut w: Vec<f64>, maxit: usize) -> Result<(Vec<f64>, f64, usize)> {
    const MEMORY: usize = 10;
    let (mut f, mut g) = loss.value_and_gradient(&w);
    if !f.is_finite() {
        return Err(Error::Divergence);
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iters = 0;
    while iters < maxit {
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= 1e-10 * (1.0 + f.abs()) {
            break;
        }
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alpha = vec![0.0; s_hist.len()];
        for k in (0..s_hist.len()).rev() {
            let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
            alpha[k] = rho * dot(&s_hist[k], &q);
            for (qi, yi) in q.iter_mut().zip(&y_hist[k]) {
                *qi -= alpha[k] * yi;
            }
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / gnorm,
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for k in 0..s_hist.len() {
            let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
            let beta = rho * dot(&y_hist[k], &q);
            for (qi, si) in q.iter_mut().zip(&s_hist[k]) {
                *qi += (alpha[k] - beta) * si;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v / gnorm).collect();
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let wn: Vec<f64> = w.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fn_, gn) = loss.value_and_gradient(&wn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * step * slope {
                accepted = Some((wn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        iters += 1;
        let Some((wn, fn_, gn)) = accepted else { break };
        let s: Vec<f64> = wn.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        let done = (f - fn_).abs() <= 1e-14 * (1.0 + f.abs());
        w = wn;
        f = fn_;
        g = gn;
        if done {
            break;
        }
    }
    if !f.is_finite() || w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence);
    }
    Ok((w, f, iters))
}

pub fn fit_mlp(x: &DMatrix<f64>, y: &[f64], params: &MlpParams, seed: u64) -> Result<MlpModel> {
    let (n, p) = x.shape();
    if y.len() != n || n == 0 {
        return Err(Error::Dimension("x and y must have the same positive number of rows".into()));
    }
    if params.size == 0 {
        return Err(Error::InvalidArgument("mlp size must be at least 1".into()));
    }
    if !(params.decay >= 0.0) {
        return Err(Error::InvalidArgument("mlp decay must be non-negative".into()));
    }
    let nw = n_weights(p, params.size);
    if nw > params.max_weights {
        return Err(Error::InvalidArgument(format!(
            "mlp with {} inputs and size {} has {nw} weights, above the limit {}",
            p, params.size, params.max_weights
        )));
    }
    let x_mean: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    let x_scale: Vec<f64> = (0..p)
        .map(|j| {
            let m = x_mean[j];
            let v = x.column(j).iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n as f64;
            if v > 0.0 { v.sqrt() } else { 1.0 }
        })
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let y_var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
    if !(y_var > 1e-24 * y_mean.abs().max(1.0).powi(2)) {
        return Ok(MlpModel {
            x_mean,
            x_scale,
            y_mean,
            y_scale: 1.0,
            weights: vec![],
            size: params.size,
            constant: Some(y_mean),
            final_loss: 0.0,
            iterations: 0,
            n_features: p,
        });
    }
    let y_scale = y_var.sqrt();
    let xs = standardize_with(x, &x_mean, &x_scale);
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
    let loss = PenalizedLoss::new(&xs, &ys, params.size, params.decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0: Vec<f64> = (0..nw).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (weights, final_loss, iterations) = lbfgs(&loss, w0, params.maxit)?;
    Ok(MlpModel {
        x_mean,
        x_scale,
        y_mean,
        y_scale,
        weights,
        size: params.size,
        constant: None,
        final_loss,
        iterations,
        n_features: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_target() {
        let x = DMatrix::from_fn(30, 2, |i, j| (i + j) as f64);
        let m = fit_mlp(&x, &[2.5; 30], &MlpParams::default(), 1).unwrap();
        assert!(m.predict(&x).iter().all(|v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn learns_linear_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gen = |rng: &mut ChaCha8Rng, n| {
            let x = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(rng));
            let y: Vec<f64> = (0..n).map(|i| 3.0 * x[(i, 0)] + 1.0).collect();
            (x, y)
        };
        let (x, y) = gen(&mut rng, 500);
        let (xt, yt) = gen(&mut rng, 500);
        let p = MlpParams { size: 4, decay: 0.0, maxit: 100, max_weights: 2000 };
        let m = fit_mlp(&x, &y, &p, 3).unwrap();
        let pred = m.predict(&xt);
        let rmse = (pred.iter().zip(&yt).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 500.0).sqrt();
        let sd = crate::linalg::sample_sd(&yt);
        assert!(rmse <= 0.1 * sd, "rmse {rmse} sd {sd}");
    }

    #[test]
    fn huge_decay_predicts_mean() {
        let x = DMatrix::from_fn(100, 3, |i, j| ((i * (j + 2)) % 11) as f64);
        let y: Vec<f64> = (0..100).map(|i| x[(i, 0)] * 2.0 - x[(i, 2)]).collect();
        let p = MlpParams { decay: 1e9, ..Default::default() };
        let m = fit_mlp(&x, &y, &p, 5).unwrap();
        let mean = y.iter().sum::<f64>() / 100.0;
        let sd = crate::linalg::sample_sd(&y);
        assert!(m.predict(&x).iter().all(|v| (v - mean).abs() < 1e-3 * sd));
    }

    #[test]
    fn weight_cap_enforced() {
        let x = DMatrix::zeros(10, 300);
        let p = MlpParams { size: 10, ..Default::default() };
        assert!(matches!(fit_mlp(&x, &[0.0; 10], &p, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = DMatrix::from_fn(40, 3, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        let y: Vec<f64> = (0..40).map(|i| x[(i, 0)].tanh() + 0.3 * x[(i, 1)]).collect();
        let loss = PenalizedLoss::new(&x, &y, 4, 0.2);
        for _ in 0..20 {
            let w: Vec<f64> = (0..loss.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, g) = loss.value_and_gradient(&w);
            for k in 0..w.len() {
                let h = 1e-6 * (1.0 + w[k].abs());
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[k] += h;
                wm[k] -= h;
                let fd = (loss.value(&wp) - loss.value(&wm)) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                assert!(rel <= 1e-4, "k={k}: fd {fd} vs {}", g[k]);
            }
        }
    }
}
