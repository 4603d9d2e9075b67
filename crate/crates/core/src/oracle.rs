//! Exact posterior `p(z | y)` for a mixture prior, an affine decoder, a linear
//! operator and Gaussian noise. Every component stays Gaussian, so the
//! posterior is again a mixture with closed-form parameters.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentmap::LatentMap;
use crate::operators::ForwardOperator;
use crate::prior::GaussianMixturePrior;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    /// Mean of the whole mixture.
    pub mean: Vec<f64>,
    /// `log p(y)`.
    pub log_evidence: f64,
}

impl PosteriorMixture {
    /// Posterior mass of the components whose mean satisfies `pred`.
    pub fn mass_where(&self, pred: impl Fn(&[f64]) -> bool) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .filter(|(_, m)| pred(m))
            .map(|(w, _)| w)
            .sum()
    }
}

pub fn exact_linear_posterior(
    prior: &GaussianMixturePrior,
    map: &LatentMap,
    op: &ForwardOperator,
    y: &DVector<f64>,
    sigma_y: f64,
) -> Result<PosteriorMixture> {
    if !map.is_linear() || !op.is_linear() {
        return Err(Error::Unsupported {
            op: "exact posterior",
            kind: if op.is_linear() {
                "nonlinear decoder".into()
            } else {
                op.kind_name().into()
            },
        });
    }
    if !(sigma_y > 0.0) {
        return Err(Error::InvalidArgument(
            "exact posterior needs sigma_y > 0".into(),
        ));
    }
    let d = prior.dim();
    let w = map.jacobian(&DVector::zeros(d))?;
    let b = map.decode(&DVector::zeros(d))?;
    let a = op.matrix()?;
    let g = &a * &w;
    let offset = &a * &b;
    if y.len() != g.nrows() {
        return Err(Error::dim(g.nrows(), y.len(), "measurement"));
    }
    let m = g.nrows();
    let noise_var = sigma_y * sigma_y;

    let mut logs = Vec::with_capacity(prior.len());
    let mut parts = Vec::with_capacity(prior.len());
    for (k, weight) in prior.weights().into_iter().enumerate() {
        let mu = prior.mean(k);
        let sigma = prior.covariance(k);
        // evidence: y ~ N(G mu + offset, G Sigma G^T + s^2 I)
        let s = &g * sigma * g.transpose() + DMatrix::identity(m, m) * noise_var;
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::InvalidArgument("evidence covariance not SPD".into()))?;
        let r = y - &g * mu - &offset;
        let white = chol
            .l()
            .solve_lower_triangular(&r)
            .expect("invertible factor");
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        logs.push(
            weight.ln() - 0.5 * (white.norm_squared() + log_det + m as f64 * (2.0 * PI).ln()),
        );
        // gain form of the conditional: mean mu + K r, cov Sigma - K G Sigma
        let sg = sigma * g.transpose();
        let gain = chol.solve(&sg.transpose()).transpose();
        let mean = mu + &gain * &r;
        let cov = sigma - &gain * &g * sigma;
        parts.push((mean, (&cov + cov.transpose()) * 0.5));
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let log_evidence = max + total.ln();
    let weights: Vec<f64> = logs.iter().map(|l| (l - log_evidence).exp()).collect();
    let mut mean = DVector::zeros(d);
    for (wk, (mk, _)) in weights.iter().zip(&parts) {
        mean.axpy(*wk, mk, 1.0);
    }
    Ok(PosteriorMixture {
        weights,
        means: parts
            .iter()
            .map(|(m, _)| m.iter().copied().collect())
            .collect(),
        covariances: parts
            .iter()
            .map(|(_, c)| c.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect(),
        mean: mean.iter().copied().collect(),
        log_evidence,
    })
}
