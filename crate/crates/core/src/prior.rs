//! Exact Gaussian-mixture latent prior.
//!
//! Under the forward kernel `z_t = sqrt(abar) z_0 + sqrt(1 - abar) eps` a
//! mixture stays a mixture, so the time-`t` score, its Hessian and the
//! posterior `p(z_0 | z_t)` are all available in closed form. The score and
//! Hessian go through a cached eigendecomposition of each covariance; the
//! posterior goes through Cholesky solves against the clean covariances, so
//! the two routes share no arithmetic.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
struct Component {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

/// Nested-array form used by the JSON config.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "PriorSpec", into = "PriorSpec")]
pub struct GaussianMixturePrior {
    components: Vec<Component>,
    dim: usize,
}

/// Exact `p(z_0 | z_t)` summary.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Posterior component probabilities.
    pub responsibilities: Vec<f64>,
}

impl TryFrom<PriorSpec> for GaussianMixturePrior {
    type Error = Error;

    fn try_from(spec: PriorSpec) -> Result<Self> {
        let dim = spec.means.first().map(Vec::len).unwrap_or(0);
        let means = spec
            .means
            .iter()
            .map(|m| DVector::from_column_slice(m))
            .collect();
        let mut covs = Vec::with_capacity(spec.covariances.len());
        for c in &spec.covariances {
            if c.len() != dim || c.iter().any(|row| row.len() != dim) {
                return Err(Error::InvalidArgument(format!(
                    "covariance must be {dim}x{dim}"
                )));
            }
            covs.push(DMatrix::from_fn(dim, dim, |i, j| c[i][j]));
        }
        GaussianMixturePrior::new(spec.weights, means, covs)
    }
}

impl From<GaussianMixturePrior> for PriorSpec {
    fn from(p: GaussianMixturePrior) -> Self {
        PriorSpec {
            weights: p.components.iter().map(|c| c.weight).collect(),
            means: p
                .components
                .iter()
                .map(|c| c.mean.iter().copied().collect())
                .collect(),
            covariances: p
                .components
                .iter()
                .map(|c| {
                    (0..p.dim)
                        .map(|i| (0..p.dim).map(|j| c.cov[(i, j)]).collect())
                        .collect()
                })
                .collect(),
        }
    }
}

impl GaussianMixturePrior {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::InvalidArgument(format!(
                "mixture needs matching weights/means/covariances, got {}/{}/{}",
                k,
                means.len(),
                covs.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be > 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "latent dimension must be >= 1".into(),
            ));
        }
        let mut components = Vec::with_capacity(k);
        for ((weight, mean), cov) in weights.into_iter().zip(means).zip(covs) {
            if mean.len() != dim {
                return Err(Error::dim(dim, mean.len(), "mixture mean"));
            }
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::dim(dim, cov.nrows(), "mixture covariance"));
            }
            let scale = cov.amax().max(1.0);
            if (&cov - cov.transpose()).amax() > 1e-12 * scale {
                return Err(Error::InvalidArgument("covariance is not symmetric".into()));
            }
            let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
                Error::InvalidArgument("covariance is not positive definite".into())
            })?;
            let eig = SymmetricEigen::new(cov.clone());
            if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
                return Err(Error::InvalidArgument(
                    "covariance has a non-positive eigenvalue".into(),
                ));
            }
            components.push(Component {
                weight,
                mean,
                cov,
                chol,
                eigvecs: eig.eigenvectors,
                eigvals: eig.eigenvalues,
            });
        }
        Ok(Self { components, dim })
    }

    /// Isotropic components `N(mean_k, var * I)`.
    pub fn isotropic(weights: Vec<f64>, means: Vec<DVector<f64>>, var: f64) -> Result<Self> {
        let dim = means.first().map(|m| m.len()).unwrap_or(0);
        let covs = vec![DMatrix::identity(dim, dim) * var; means.len()];
        Self::new(weights, means, covs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.components[k].mean
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.components[k].cov
    }

    /// Draws `z_0`: component by weight, then a Gaussian draw through the Cholesky factor.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let eps = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &c.mean + c.chol.l() * eps
    }

    /// Mixture of the time-`t` marginal: means scaled by `sqrt(abar)`,
    /// covariances `abar * Sigma + (1 - abar) I`.
    pub fn marginal(&self, alpha_bar: f64) -> GaussianMixturePrior {
        let s = alpha_bar.sqrt();
        let id = DMatrix::<f64>::identity(self.dim, self.dim);
        let weights = self.weights();
        let means = self.components.iter().map(|c| &c.mean * s).collect();
        let covs = self
            .components
            .iter()
            .map(|c| &c.cov * alpha_bar + &id * (1.0 - alpha_bar))
            .collect();
        GaussianMixturePrior::new(weights, means, covs)
            .expect("marginal of a valid mixture is valid")
    }

    pub fn marginal_at_t(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
    ) -> Result<GaussianMixturePrior> {
        schedule.check_step(t)?;
        Ok(self.marginal(schedule.alpha_bar(t)))
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::dim(self.dim, z.len(), "latent vector"));
        }
        Ok(())
    }

    /// Per-component log weight + log density, precision-vector and precision
    /// eigenvalues at noise level `abar`, via the eigen cache.
    fn marginal_terms(
        &self,
        alpha_bar: f64,
        z: &DVector<f64>,
    ) -> Vec<(f64, DVector<f64>, DVector<f64>)> {
        let s = alpha_bar.sqrt();
        let log_norm = 0.5 * self.dim as f64 * (2.0 * PI).ln();
        self.components
            .iter()
            .map(|c| {
                let lam = c.eigvals.map(|l| alpha_bar * l + (1.0 - alpha_bar));
                let diff = z - &c.mean * s;
                let proj = c.eigvecs.tr_mul(&diff);
                let scaled = proj.component_div(&lam);
                let quad = proj.dot(&scaled);
                let log_det: f64 = lam.iter().map(|l| l.ln()).sum();
                let logp = c.weight.ln() - 0.5 * quad - 0.5 * log_det - log_norm;
                // C^{-1} (z - m)
                let prec_diff = &c.eigvecs * scaled;
                (logp, prec_diff, lam)
            })
            .collect()
    }

    fn responsibilities(logs: &[f64]) -> (Vec<f64>, f64) {
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        (logs.iter().map(|l| (l - lse).exp()).collect(), lse)
    }

    pub fn log_density_at(&self, alpha_bar: f64, z: &DVector<f64>) -> Result<f64> {
        self.check_dim(z)?;
        let terms = self.marginal_terms(alpha_bar, z);
        let logs: Vec<f64> = terms.iter().map(|t| t.0).collect();
        Ok(Self::responsibilities(&logs).1)
    }

    pub fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        self.log_density_at(1.0, z)
    }

    /// `grad log p_t(z)` at noise level `abar`.
    pub fn score_at(&self, alpha_bar: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(z)?;
        let terms = self.marginal_terms(alpha_bar, z);
        let logs: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let (resp, _) = Self::responsibilities(&logs);
        let mut g = DVector::zeros(self.dim);
        for (r, (_, prec_diff, _)) in resp.iter().zip(&terms) {
            g.axpy(-r, prec_diff, 1.0);
        }
        Ok(g)
    }

    pub fn score_t(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        schedule.check_step(t)?;
        self.score_at(schedule.alpha_bar(t), z)
    }

    /// Hessian of `log p_t` via `sum_k r_k (H_k + g_k g_k^T) - g g^T`.
    pub fn hessian_at(&self, alpha_bar: f64, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(z)?;
        let terms = self.marginal_terms(alpha_bar, z);
        let logs: Vec<f64> = terms.iter().map(|t| t.0).collect();
        let (resp, _) = Self::responsibilities(&logs);
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut g = DVector::zeros(self.dim);
        for ((r, (_, prec_diff, lam)), c) in resp.iter().zip(&terms).zip(&self.components) {
            let gk = -prec_diff;
            let inv = DMatrix::from_diagonal(&lam.map(|l| 1.0 / l));
            let hk = -(&c.eigvecs * inv * c.eigvecs.transpose());
            h += (hk + &gk * gk.transpose()) * *r;
            g.axpy(*r, &gk, 1.0);
        }
        h -= &g * g.transpose();
        // exact symmetry
        let sym = (&h + h.transpose()) * 0.5;
        Ok(sym)
    }

    pub fn hessian_log_density_t(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        z: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        schedule.check_step(t)?;
        self.hessian_at(schedule.alpha_bar(t), z)
    }

    /// Exact Bayes posterior of `z_0` given `z_t` at noise level `abar` in (0, 1).
    pub fn posterior_at(&self, alpha_bar: f64, z_t: &DVector<f64>) -> Result<Posterior> {
        self.check_dim(z_t)?;
        if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "posterior needs abar in (0, 1), got {alpha_bar}"
            )));
        }
        let d = self.dim;
        let noise = 1.0 - alpha_bar;
        let s = alpha_bar.sqrt();
        let id = DMatrix::<f64>::identity(d, d);
        let log_norm = 0.5 * d as f64 * (2.0 * PI).ln();

        let mut logs = Vec::with_capacity(self.len());
        let mut parts = Vec::with_capacity(self.len());
        for c in &self.components {
            // evidence: N(z_t; s mu, abar Sigma + (1 - abar) I) via Cholesky
            let marg = &c.cov * alpha_bar + &id * noise;
            let chol = Cholesky::new(marg).ok_or_else(|| {
                Error::InvalidArgument("marginal covariance lost definiteness".into())
            })?;
            let diff = z_t - &c.mean * s;
            let white = chol
                .l()
                .solve_lower_triangular(&diff)
                .expect("cholesky factor is invertible");
            let log_det = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            logs.push(c.weight.ln() - 0.5 * white.norm_squared() - 0.5 * log_det - log_norm);

            // conjugate update: P = (Sigma^{-1} + abar/(1-abar) I)^{-1}
            let sigma_inv = c.chol.inverse();
            let precision = &sigma_inv + &id * (alpha_bar / noise);
            let post_cov = Cholesky::new(precision)
                .ok_or_else(|| Error::InvalidArgument("posterior precision not SPD".into()))?
                .inverse();
            let rhs = &sigma_inv * &c.mean + z_t * (s / noise);
            let post_mean = &post_cov * rhs;
            parts.push((post_mean, post_cov));
        }
        let (resp, _) = Self::responsibilities(&logs);
        let mut mean = DVector::zeros(d);
        for (r, (m, _)) in resp.iter().zip(&parts) {
            mean.axpy(*r, m, 1.0);
        }
        let mut cov = DMatrix::zeros(d, d);
        for (r, (m, p)) in resp.iter().zip(&parts) {
            let dm = m - &mean;
            cov += (p + &dm * dm.transpose()) * *r;
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Posterior {
            mean,
            cov,
            responsibilities: resp,
        })
    }

    pub fn posterior_z0_given_zt(
        &self,
        schedule: &NoiseSchedule,
        t: usize,
        z_t: &DVector<f64>,
    ) -> Result<Posterior> {
        schedule.check_step(t)?;
        self.posterior_at(schedule.alpha_bar(t), z_t)
    }
}
