//! DDIM sampling with an exact mixture score, and the ReSample loop.
//!
//! The chain starts at `z_{T-1} ~ N(0, I)` and walks `t = T-2, ..., 0`. Each
//! step predicts `z0_hat(z_{t+1})` by Tweedie's formula, takes an
//! unconditional DDIM step to `z'_t`, and at resample steps replaces `z'_t`
//! by a draw that blends a measurement-consistent latent with `z'_t`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentmap::LatentMap;
use crate::operators::{ForwardOperator, Measurement};
use crate::optim::{
    data_loss, data_loss_grad, latent_consistency, pixel_consistency_cg, ConsistencyConfig,
};
use crate::prior::GaussianMixturePrior;
use crate::rng::standard_normal;
use crate::schedule::{NoiseSchedule, ResampleTimetable, StageMode};

/// Tolerance of the in-loop Tweedie versus Bayes-posterior check.
pub const TWEEDIE_CHECK_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RemapMode {
    #[default]
    Resample,
    Encode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDpsConfig {
    /// `k` in the step size `zeta_t = k * abar_t`.
    pub zeta_scale: f64,
}

impl Default for LatentDpsConfig {
    fn default() -> Self {
        Self { zeta_scale: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub schedule: NoiseSchedule,
    pub timetable: ResampleTimetable,
    pub gamma: f64,
    pub consistency: ConsistencyConfig,
    pub latent_dps: Option<LatentDpsConfig>,
    pub remap_mode: RemapMode,
    /// Compare every Tweedie prediction against the exact posterior mean.
    pub check_tweedie: bool,
}

impl SamplerConfig {
    pub fn new(schedule: NoiseSchedule, timetable: ResampleTimetable, gamma: f64) -> Self {
        Self {
            schedule,
            timetable,
            gamma,
            consistency: ConsistencyConfig::default(),
            latent_dps: None,
            remap_mode: RemapMode::Resample,
            check_tweedie: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if let Some(dps) = self.latent_dps {
            if !(dps.zeta_scale >= 0.0) {
                return Err(Error::InvalidArgument("zeta scale must be >= 0".into()));
            }
        }
        if let Some(&last) = self.timetable.resample_steps.last() {
            if last >= self.schedule.steps() {
                return Err(Error::Domain {
                    t: last,
                    range: format!("[1, {})", self.schedule.steps()),
                });
            }
        }
        if self.timetable.resample_steps.contains(&0) {
            return Err(Error::Domain {
                t: 0,
                range: format!("[1, {})", self.schedule.steps()),
            });
        }
        self.consistency.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: usize,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub resampled: bool,
    /// `||y - A(D(z0_hat(z_{t+1})))||`.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub solver: String,
    pub z0: Vec<f64>,
    pub x0: Vec<f64>,
    /// Terminal `0.5 ||y - A(x0)||^2`.
    pub residual: f64,
    pub consistency_iterations: usize,
    pub steps: Vec<StepDiagnostics>,
}

/// `(z + (1 - abar) score) / sqrt(abar)`.
pub fn tweedie_from_score(alpha_bar: f64, z: &DVector<f64>, score: &DVector<f64>) -> DVector<f64> {
    (z + score * (1.0 - alpha_bar)) / alpha_bar.sqrt()
}

pub fn tweedie_estimate(
    prior: &GaussianMixturePrior,
    schedule: &NoiseSchedule,
    t: usize,
    z_t: &DVector<f64>,
) -> Result<DVector<f64>> {
    let score = prior.score_t(schedule, t, z_t)?;
    Ok(tweedie_from_score(schedule.alpha_bar(t), z_t, &score))
}

/// Posterior covariance from the score Hessian:
/// `((1 - abar)^2 / abar) H + ((1 - abar) / abar) I`.
pub fn tweedie_covariance(
    prior: &GaussianMixturePrior,
    alpha_bar: f64,
    z_t: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let h = prior.hessian_at(alpha_bar, z_t)?;
    let d = z_t.len();
    let noise = 1.0 - alpha_bar;
    Ok(h * (noise * noise / alpha_bar) + DMatrix::identity(d, d) * (noise / alpha_bar))
}

/// The DDIM update from `z_next` (at `abar_next`) to `abar`, given the score
/// at `z_next`, the noise scale `eta * delta` and a standard normal draw.
pub fn ddim_update(
    alpha_bar: f64,
    alpha_bar_next: f64,
    eta_delta: f64,
    z_next: &DVector<f64>,
    score: &DVector<f64>,
    noise: &DVector<f64>,
) -> Result<DVector<f64>> {
    let z0 = tweedie_from_score(alpha_bar_next, z_next, score);
    let eps_hat = score * -(1.0 - alpha_bar_next).sqrt();
    let mut c = 1.0 - alpha_bar - eta_delta * eta_delta;
    if c < 0.0 {
        if c < -1e-12 {
            return Err(Error::InvalidArgument(format!(
                "DDIM noise coefficient is negative ({c:e}); eta too large for the schedule"
            )));
        }
        c = 0.0;
    }
    Ok(z0 * alpha_bar.sqrt() + eps_hat * c.sqrt() + noise * eta_delta)
}

/// One unconditional step `z_{t+1} -> z'_t`.
pub fn ddim_step<R: Rng + ?Sized>(
    prior: &GaussianMixturePrior,
    schedule: &NoiseSchedule,
    t: usize,
    z_next: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    schedule.check_step(t + 1)?;
    let noise = standard_normal(rng, z_next.len());
    let score = prior.score_at(schedule.alpha_bar(t + 1), z_next)?;
    ddim_update(
        schedule.alpha_bar(t),
        schedule.alpha_bar(t + 1),
        schedule.eta() * schedule.delta(t + 1),
        z_next,
        &score,
        &noise,
    )
}

/// Plain DDIM sampling from `z_{T-1} ~ N(0, I)` down to `z_0`.
pub fn ddim_sample<R: Rng + ?Sized>(
    prior: &GaussianMixturePrior,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut z = standard_normal(rng, prior.dim());
    for t in (0..schedule.steps() - 1).rev() {
        z = ddim_step(prior, schedule, t, &z, rng).map_err(|e| e.at_step(t))?;
    }
    Ok(z)
}

/// Mean weight on `z0_hat` and variance of the resampling kernel:
/// `(sigma2 sqrt(abar) / (sigma2 + 1 - abar), sigma2 (1 - abar) / (sigma2 + 1 - abar))`.
pub fn resample_kernel(alpha_bar: f64, sigma2: f64) -> (f64, f64) {
    let noise = 1.0 - alpha_bar;
    let denom = sigma2 + noise;
    if denom == 0.0 {
        return (alpha_bar.sqrt(), 0.0);
    }
    (sigma2 * alpha_bar.sqrt() / denom, sigma2 * noise / denom)
}

/// Draw from `N(sqrt(abar) z0_hat, (1 - abar) I)`.
pub fn stochastic_encode_at<R: Rng + ?Sized>(
    alpha_bar: f64,
    z0_hat: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let noise = standard_normal(rng, z0_hat.len());
    z0_hat * alpha_bar.sqrt() + noise * (1.0 - alpha_bar).sqrt()
}

pub fn stochastic_encode<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    z0_hat: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    schedule.check_step(t)?;
    Ok(stochastic_encode_at(schedule.alpha_bar(t), z0_hat, rng))
}

/// Draw from the resampling kernel centered between `z0_hat_y` (encoded to
/// level `abar`) and the unconditional sample `z_prime`.
pub fn stochastic_resample_at<R: Rng + ?Sized>(
    alpha_bar: f64,
    z0_hat_y: &DVector<f64>,
    z_prime: &DVector<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(sigma2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma2 must be >= 0, got {sigma2}"
        )));
    }
    if z0_hat_y.len() != z_prime.len() {
        return Err(Error::dim(z_prime.len(), z0_hat_y.len(), "resample anchor"));
    }
    if sigma2 == 0.0 {
        return Ok(z_prime.clone());
    }
    let noise = 1.0 - alpha_bar;
    let denom = sigma2 + noise;
    let mean = (z0_hat_y * (sigma2 * alpha_bar.sqrt()) + z_prime * noise) / denom;
    let var = sigma2 * noise / denom;
    Ok(mean + standard_normal(rng, z_prime.len()) * var.sqrt())
}

pub fn stochastic_resample<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    t: usize,
    z0_hat_y: &DVector<f64>,
    z_prime: &DVector<f64>,
    sigma2: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    schedule.check_step(t)?;
    stochastic_resample_at(schedule.alpha_bar(t), z0_hat_y, z_prime, sigma2, rng)
}

/// Gradient of `||y - A(D(z0_hat(z)))||^2` with respect to `z` at level `abar`.
pub fn latent_dps_gradient(
    prior: &GaussianMixturePrior,
    map: &LatentMap,
    op: &ForwardOperator,
    y: &DVector<f64>,
    alpha_bar: f64,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    let score = prior.score_at(alpha_bar, z)?;
    let z0 = tweedie_from_score(alpha_bar, z, &score);
    let (_, g0) = data_loss_grad(map, op, y, &z0)?;
    // d z0_hat / d z = (I + (1 - abar) H) / sqrt(abar), symmetric
    let h = prior.hessian_at(alpha_bar, z)?;
    let jt_g = &g0 + h * &g0 * (1.0 - alpha_bar);
    Ok(jt_g * (2.0 / alpha_bar.sqrt()))
}

fn check_finite(z: &DVector<f64>, last: &DVector<f64>, t: usize) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("latent state at t={t}"),
            last_finite: Some(last.iter().copied().collect()),
        })
    }
}

fn check_dims(
    prior: &GaussianMixturePrior,
    map: &LatentMap,
    op: &ForwardOperator,
    y: &Measurement,
) -> Result<()> {
    if map.d_latent() != prior.dim() {
        return Err(Error::dim(
            prior.dim(),
            map.d_latent(),
            "decoder latent dimension",
        ));
    }
    if op.n() != map.d_pixel() {
        return Err(Error::dim(
            map.d_pixel(),
            op.n(),
            "operator input dimension",
        ));
    }
    if y.y.len() != op.m() {
        return Err(Error::dim(op.m(), y.y.len(), "measurement length"));
    }
    Ok(())
}

struct Chain<'a> {
    prior: &'a GaussianMixturePrior,
    map: &'a LatentMap,
    op: &'a ForwardOperator,
    y: DVector<f64>,
    cfg: &'a SamplerConfig,
    consistency: bool,
    dps: Option<LatentDpsConfig>,
}

impl Chain<'_> {
    fn run<R: Rng + ?Sized>(&self, solver: &str, rng: &mut R) -> Result<ReconstructionReport> {
        let schedule = &self.cfg.schedule;
        let mut z = standard_normal(rng, self.prior.dim());
        let mut steps = Vec::with_capacity(schedule.steps() - 1);
        let mut consistency_iterations = 0;
        for t in (0..schedule.steps() - 1).rev() {
            let (next, diag, iters) = self.step(t, &z, rng).map_err(|e| e.at_step(t))?;
            check_finite(&next, &z, t)?;
            z = next;
            steps.push(diag);
            consistency_iterations += iters;
        }
        let x0 = self.map.decode(&z)?;
        let residual = 0.5 * (&self.y - self.op.apply(&x0)?).norm_squared();
        Ok(ReconstructionReport {
            solver: solver.to_string(),
            z0: z.iter().copied().collect(),
            x0: x0.iter().copied().collect(),
            residual,
            consistency_iterations,
            steps,
        })
    }

    fn step<R: Rng + ?Sized>(
        &self,
        t: usize,
        z_next: &DVector<f64>,
        rng: &mut R,
    ) -> Result<(DVector<f64>, StepDiagnostics, usize)> {
        let schedule = &self.cfg.schedule;
        let (ab, ab_next) = (schedule.alpha_bar(t), schedule.alpha_bar(t + 1));
        let noise = standard_normal(rng, z_next.len());
        let score = self.prior.score_at(ab_next, z_next)?;
        let z0_hat = tweedie_from_score(ab_next, z_next, &score);
        if self.cfg.check_tweedie {
            let exact = self.prior.posterior_at(ab_next, z_next)?.mean;
            let err = (&z0_hat - exact).amax();
            if !(err < TWEEDIE_CHECK_TOL) {
                return Err(Error::CheckFailed {
                    what: "tweedie",
                    error: err,
                    tol: TWEEDIE_CHECK_TOL,
                });
            }
        }
        let mut z_prime = ddim_update(
            ab,
            ab_next,
            schedule.eta() * schedule.delta(t + 1),
            z_next,
            &score,
            &noise,
        )?;
        if let Some(dps) = self.dps {
            if dps.zeta_scale > 0.0 {
                let g =
                    latent_dps_gradient(self.prior, self.map, self.op, &self.y, ab_next, z_next)?;
                z_prime.axpy(-dps.zeta_scale * ab, &g, 1.0);
            }
        }
        let residual = (2.0 * data_loss(self.map, self.op, &self.y, &z0_hat)?).sqrt();
        let mode = self.cfg.timetable.mode_at(t);
        if !self.consistency || !self.cfg.timetable.is_resample_step(t) || mode == StageMode::None {
            let diag = StepDiagnostics {
                t,
                loss_before: None,
                loss_after: None,
                resampled: false,
                residual,
            };
            return Ok((z_prime, diag, 0));
        }

        let loss_before = 0.5 * residual * residual;
        let cc = &self.cfg.consistency;
        let (z0_y, iters) = if mode == StageMode::Pixel && self.op.is_linear() {
            let out = pixel_consistency_cg(self.map, self.op, &self.y, &z0_hat, cc)?;
            (out.z, out.encoded.iterations)
        } else {
            let out = latent_consistency(self.map, self.op, &self.y, &z0_hat, cc)?;
            (out.z, out.iterations)
        };
        let loss_after = data_loss(self.map, self.op, &self.y, &z0_y)?;
        let z = match self.cfg.remap_mode {
            RemapMode::Resample => {
                let sigma2 = schedule.resample_sigma2(t, self.cfg.gamma)?;
                stochastic_resample_at(ab, &z0_y, &z_prime, sigma2, rng)?
            }
            RemapMode::Encode => stochastic_encode_at(ab, &z0_y, rng),
        };
        let diag = StepDiagnostics {
            t,
            loss_before: Some(loss_before),
            loss_after: Some(loss_after),
            resampled: true,
            residual,
        };
        Ok((z, diag, iters))
    }
}

/// Diffusion sampling with hard data consistency at the timetable's resample steps.
pub fn resample_solve<R: Rng + ?Sized>(
    prior: &GaussianMixturePrior,
    map: &LatentMap,
    op: &ForwardOperator,
    measurement: &Measurement,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ReconstructionReport> {
    config.validate()?;
    check_dims(prior, map, op, measurement)?;
    Chain {
        prior,
        map,
        op,
        y: DVector::from_column_slice(&measurement.y),
        cfg: config,
        consistency: true,
        dps: config.latent_dps,
    }
    .run("resample", rng)
}

/// Latent-DPS baseline: every DDIM step is followed by a likelihood gradient
/// step of size `k * abar_t` (default `k = 0.5`); no hard consistency.
pub fn latent_dps_solve<R: Rng + ?Sized>(
    prior: &GaussianMixturePrior,
    map: &LatentMap,
    op: &ForwardOperator,
    measurement: &Measurement,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ReconstructionReport> {
    config.validate()?;
    check_dims(prior, map, op, measurement)?;
    Chain {
        prior,
        map,
        op,
        y: DVector::from_column_slice(&measurement.y),
        cfg: config,
        consistency: false,
        dps: Some(config.latent_dps.unwrap_or_default()),
    }
    .run("latent_dps", rng)
}
