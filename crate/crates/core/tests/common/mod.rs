#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use resample_core::prior::GaussianMixturePrior;

/// Posterior of `z_0` given `z_t = sqrt(abar) z_0 + sqrt(1 - abar) e`, by the
/// conjugate formulas with explicit inverses and LU determinants.
pub struct BayesOracle {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn bayes_posterior(
    prior: &GaussianMixturePrior,
    alpha_bar: f64,
    z: &DVector<f64>,
) -> BayesOracle {
    let d = z.len();
    let sa = alpha_bar.sqrt();
    let mut logs = Vec::new();
    let mut parts = Vec::new();
    for (k, w) in prior.weights().into_iter().enumerate() {
        let mu = prior.mean(k);
        let sigma = prior.covariance(k);
        let s = sigma * alpha_bar + DMatrix::identity(d, d) * (1.0 - alpha_bar);
        let s_inv = s
            .clone()
            .try_inverse()
            .expect("invertible marginal covariance");
        let r = z - mu * sa;
        let quad = (r.transpose() * &s_inv * &r)[(0, 0)];
        logs.push(w.ln() - 0.5 * quad - 0.5 * s.determinant().ln());
        let gain = sigma * &s_inv;
        parts.push((mu + &gain * &r * sa, sigma - &gain * sigma * alpha_bar));
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for (w, (m, c)) in raw.iter().map(|v| v / total).zip(&parts) {
        mean += m * w;
        second += (c + m * m.transpose()) * w;
    }
    let cov = second - &mean * mean.transpose();
    BayesOracle { mean, cov }
}

pub fn central_difference<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| {
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    })
}

pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
