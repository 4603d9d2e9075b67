//! Desk-scale experiment suites. Each is a pure function of its seed and
//! returns raw numbers plus pass/fail checks; trials run through
//! [`crate::parallel`], so results do not depend on the execution mode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{hash_json, presets, ExperimentConfig, Solver, SAMPLER_STREAM};
use crate::error::{Error, Result};
use crate::io::CsvRow;
use crate::latentmap::LatentMap;
use crate::metrics::mc_moments;
use crate::operators::ForwardOperator;
use crate::optim::{pixel_consistency_closed_form, ConsistencyConfig};
use crate::oracle::exact_linear_posterior;
use crate::parallel::{try_map_trials, Execution};
use crate::prior::GaussianMixturePrior;
use crate::rng::{standard_normal, stream};
use crate::sampler::{
    resample_kernel, stochastic_encode_at, stochastic_resample_at, tweedie_covariance,
    tweedie_estimate, RemapMode,
};
use crate::schedule::NoiseSchedule;

pub const EXPERIMENTS: [&str; 10] = [
    "prop-distributions",
    "variance-ordering",
    "unbiasedness",
    "covariance-theorem",
    "tweedie-exactness",
    "resample-vs-encode",
    "resample-vs-dps",
    "skip-step-sweep",
    "gamma-sweep",
    "ct-bench",
];

/// Monte Carlo sample size of the distributional suites.
pub const MC_DRAWS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub protocol: Value,
    pub metrics: Vec<(String, f64)>,
    pub checks: Vec<Check>,
}

impl ExperimentOutcome {
    fn new(name: &str, seed: u64, protocol: Value) -> Self {
        Self {
            name: name.into(),
            seed,
            config_hash: hash_json(&protocol),
            protocol,
            metrics: Vec::new(),
            checks: Vec::new(),
        }
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push((name.into(), value));
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn metric_value(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let row = |metric: String, value: f64| CsvRow {
            experiment: self.name.clone(),
            metric,
            value,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
        };
        let mut rows: Vec<CsvRow> = self
            .metrics
            .iter()
            .map(|(m, v)| row(m.clone(), *v))
            .collect();
        rows.extend(
            self.checks
                .iter()
                .map(|c| row(format!("check:{}", c.name), f64::from(u8::from(c.passed)))),
        );
        rows
    }
}

pub fn run_experiment(name: &str, seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    match name {
        "prop-distributions" => prop_distributions(seed, exec),
        "variance-ordering" => variance_ordering(seed, exec),
        "unbiasedness" => unbiasedness(seed, exec),
        "covariance-theorem" => covariance_theorem(seed, exec),
        "tweedie-exactness" => tweedie_exactness(seed, exec),
        "resample-vs-encode" => resample_vs_encode(seed, exec),
        "resample-vs-dps" => resample_vs_dps(seed, exec),
        "skip-step-sweep" => skip_step_sweep(seed, exec),
        "gamma-sweep" => gamma_sweep(seed, exec),
        "ct-bench" => ct_bench(seed, exec),
        other => Err(Error::UnknownExperiment(other.into())),
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn standard_schedule(steps: usize) -> NoiseSchedule {
    NoiseSchedule::linear(steps, 1e-4, 0.02, 0.0).expect("valid schedule")
}

/// Mixture with `k` components in dimension `dim`: uniform-ish weights,
/// spread means and random well-conditioned covariances `L L^T + 0.1 I`.
pub fn random_mixture<R: Rng + ?Sized>(rng: &mut R, dim: usize, k: usize) -> GaussianMixturePrior {
    let mut weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let means = (0..k).map(|_| standard_normal(rng, dim) * 2.0).collect();
    let covs = (0..k)
        .map(|_| {
            let l = DMatrix::from_iterator(
                dim,
                dim,
                standard_normal(rng, dim * dim).iter().map(|v| v * 0.5),
            );
            &l * l.transpose() + DMatrix::identity(dim, dim) * 0.1
        })
        .collect();
    GaussianMixturePrior::new(weights, means, covs).expect("valid mixture")
}

/// A random `(mixture, t, z_t)` triple with `z_t` drawn from the noised marginal.
fn random_case(
    seed: u64,
    i: usize,
    schedule: &NoiseSchedule,
) -> (GaussianMixturePrior, usize, DVector<f64>) {
    let mut rng = stream(seed, i as u64);
    let dim = rng.random_range(1..=4);
    let k = rng.random_range(1..=4);
    let prior = random_mixture(&mut rng, dim, k);
    let t = rng.random_range(0..schedule.steps());
    let ab = schedule.alpha_bar(t);
    let z0 = prior.sample(&mut rng);
    let z_t = z0 * ab.sqrt() + standard_normal(&mut rng, dim) * (1.0 - ab).sqrt();
    (prior, t, z_t)
}

fn tweedie_exactness(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    const CASES: usize = 200;
    const TOL: f64 = 1e-10;
    let schedule = standard_schedule(500);
    let mut out = ExperimentOutcome::new(
        "tweedie-exactness",
        seed,
        json!({"experiment": "tweedie-exactness", "cases": CASES, "steps": 500, "tol": TOL}),
    );
    let errors = try_map_trials(CASES, exec, |i| -> Result<f64> {
        let (prior, t, z) = random_case(seed, i, &schedule);
        let est = tweedie_estimate(&prior, &schedule, t, &z)?;
        let exact = prior.posterior_z0_given_zt(&schedule, t, &z)?.mean;
        Ok((est - exact).amax())
    })?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    out.metric("max_abs_error", worst);
    out.metric("cases", CASES as f64);
    out.check(
        "tweedie_matches_posterior_mean",
        worst < TOL,
        format!("max error {worst:e} < {TOL:e}"),
    );
    Ok(out)
}

fn covariance_theorem(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    const CASES: usize = 100;
    const TOL: f64 = 1e-8;
    let schedule = standard_schedule(500);
    let mut out = ExperimentOutcome::new(
        "covariance-theorem",
        seed,
        json!({"experiment": "covariance-theorem", "cases": CASES, "steps": 500, "tol": TOL}),
    );
    let errors = try_map_trials(CASES, exec, |i| -> Result<f64> {
        let (prior, t, z) = random_case(seed, 10_000 + i, &schedule);
        let formula = tweedie_covariance(&prior, schedule.alpha_bar(t), &z)?;
        let exact = prior.posterior_z0_given_zt(&schedule, t, &z)?.cov;
        Ok((formula - exact).amax())
    })?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    out.metric("max_abs_error", worst);
    out.metric("cases", CASES as f64);
    out.check(
        "hessian_covariance_matches_posterior",
        worst < TOL,
        format!("max error {worst:e} < {TOL:e}"),
    );
    Ok(out)
}

/// Result of comparing MC moments against a Gaussian `N(mean, var I)`.
#[derive(Clone, Debug)]
pub struct MomentCheck {
    /// Largest `|mean_hat - mean| / stderr` over coordinates.
    pub mean_z: f64,
    /// Largest `|var_hat - var| / se(var_hat)` over coordinates.
    pub var_z: f64,
    /// Largest `|cov_hat_ij| / se(cov_hat_ij)` over off-diagonal entries.
    pub cov_z: f64,
    pub sample_var: Vec<f64>,
}

impl MomentCheck {
    pub fn within(&self, k: f64) -> bool {
        self.mean_z < k && self.var_z < k && self.cov_z < k
    }
}

pub fn gaussian_moment_check(
    samples: &DMatrix<f64>,
    mean: &DVector<f64>,
    var: f64,
) -> Result<MomentCheck> {
    let n = samples.nrows() as f64;
    let m = mc_moments(samples)?;
    let d = mean.len();
    let mut mean_z: f64 = 0.0;
    let mut var_z: f64 = 0.0;
    let mut cov_z: f64 = 0.0;
    for i in 0..d {
        mean_z = mean_z.max((m.mean[i] - mean[i]).abs() / m.stderr_mean[i]);
        // sampling sd of the unbiased variance estimator of a normal
        let se_var = var * (2.0 / (n - 1.0)).sqrt();
        var_z = var_z.max((m.cov[(i, i)] - var).abs() / se_var);
        for j in 0..i {
            let se_cov = var / n.sqrt();
            cov_z = cov_z.max(m.cov[(i, j)].abs() / se_cov);
        }
    }
    Ok(MomentCheck {
        mean_z,
        var_z,
        cov_z,
        sample_var: (0..d).map(|i| m.cov[(i, i)]).collect(),
    })
}

fn draw_matrix(n: usize, d: usize, mut draw: impl FnMut() -> DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, d);
    for r in 0..n {
        out.row_mut(r).copy_from(&draw().transpose());
    }
    out
}

fn prop_distributions(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    const SETTINGS: usize = 5;
    let dims = [1usize, 2, 3, 4, 4];
    let mut out = ExperimentOutcome::new(
        "prop-distributions",
        seed,
        json!({"experiment": "prop-distributions", "settings": SETTINGS, "draws": MC_DRAWS, "dims": dims, "k_stderr": 3.0}),
    );
    let results = try_map_trials(
        SETTINGS,
        exec,
        |s| -> Result<(MomentCheck, MomentCheck, f64, f64)> {
            let d = dims[s];
            let mut rng = stream(seed, s as u64);
            let ab: f64 = rng.random_range(0.05..0.95);
            let sigma2 = 10f64.powf(rng.random_range(-2.0..1.0));
            let z0 = standard_normal(&mut rng, d);
            let zp = standard_normal(&mut rng, d);

            let mut enc_rng = stream(seed, 100 + s as u64);
            let enc = draw_matrix(MC_DRAWS, d, || stochastic_encode_at(ab, &z0, &mut enc_rng));
            let enc_check = gaussian_moment_check(&enc, &(&z0 * ab.sqrt()), 1.0 - ab)?;

            let mut res_rng = stream(seed, 200 + s as u64);
            let res = draw_matrix(MC_DRAWS, d, || {
                stochastic_resample_at(ab, &z0, &zp, sigma2, &mut res_rng).expect("valid resample")
            });
            let (_, var) = resample_kernel(ab, sigma2);
            let target = (&z0 * (sigma2 * ab.sqrt()) + &zp * (1.0 - ab)) / (sigma2 + 1.0 - ab);
            let res_check = gaussian_moment_check(&res, &target, var)?;
            Ok((enc_check, res_check, ab, sigma2))
        },
    )?;
    let mut all_enc = true;
    let mut all_res = true;
    for (s, (enc, res, ab, sigma2)) in results.iter().enumerate() {
        out.metric(format!("setting{s}/alpha_bar"), *ab);
        out.metric(format!("setting{s}/sigma2"), *sigma2);
        for (tag, c) in [("encode", enc), ("resample", res)] {
            out.metric(format!("setting{s}/{tag}/mean_z"), c.mean_z);
            out.metric(format!("setting{s}/{tag}/var_z"), c.var_z);
            out.metric(format!("setting{s}/{tag}/cov_z"), c.cov_z);
        }
        all_enc &= enc.within(3.0);
        all_res &= res.within(3.0);
    }
    out.check(
        "stochastic_encoding_moments",
        all_enc,
        "mean, variance and covariance within 3 standard errors".into(),
    );
    out.check(
        "stochastic_resampling_moments",
        all_res,
        "mean, variance and covariance within 3 standard errors".into(),
    );
    Ok(out)
}

fn variance_ordering(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    let grid: Vec<f64> = (0..50)
        .map(|i| 10f64.powf(-3.0 + 6.0 * i as f64 / 49.0))
        .collect();
    let levels = [0.1, 0.5, 0.9];
    let empirical_sigma2 = [0.05, 0.25, 1.0, 4.0];
    let ab = 0.5;
    let d = 4;
    let mut out = ExperimentOutcome::new(
        "variance-ordering",
        seed,
        json!({"experiment": "variance-ordering", "grid": [1e-3, 1e3, 50], "alpha_bars": levels,
               "empirical_alpha_bar": ab, "empirical_sigma2": empirical_sigma2, "dim": d, "draws": MC_DRAWS}),
    );
    let mut analytic = true;
    for &level in &levels {
        for &s2 in &grid {
            analytic &= resample_kernel(level, s2).1 < 1.0 - level;
        }
    }
    out.metric("analytic_grid_points", (grid.len() * levels.len()) as f64);
    out.check(
        "analytic_variance_ordering",
        analytic,
        "sigma2 (1-abar) / (sigma2 + 1 - abar) < 1 - abar on the grid".into(),
    );

    let pairs = try_map_trials(
        empirical_sigma2.len(),
        exec,
        |i| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut rng = stream(seed, i as u64);
            let z0 = standard_normal(&mut rng, d);
            let zp = standard_normal(&mut rng, d);
            let mut enc_rng = stream(seed, 100 + i as u64);
            let mut res_rng = stream(seed, 200 + i as u64);
            let enc = draw_matrix(MC_DRAWS, d, || stochastic_encode_at(ab, &z0, &mut enc_rng));
            let res = draw_matrix(MC_DRAWS, d, || {
                stochastic_resample_at(ab, &z0, &zp, empirical_sigma2[i], &mut res_rng)
                    .expect("valid resample")
            });
            let enc_var = mc_moments(&enc)?.cov.diagonal().iter().copied().collect();
            let res_var = mc_moments(&res)?.cov.diagonal().iter().copied().collect();
            Ok((res_var, enc_var))
        },
    )?;
    let mut empirical = true;
    for (s2, (res, enc)) in empirical_sigma2.iter().zip(&pairs) {
        for (j, (r, e)) in res.iter().zip(enc).enumerate() {
            out.metric(format!("sigma2={s2}/coord{j}/var_resample"), *r);
            out.metric(format!("sigma2={s2}/coord{j}/var_encode"), *e);
            empirical &= r < e;
        }
    }
    out.check(
        "empirical_variance_ordering",
        empirical,
        "per-coordinate resample variance below encode variance".into(),
    );
    Ok(out)
}

fn unbiasedness(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    let schedule = standard_schedule(500);
    let steps = [50usize, 150, 300];
    let gamma = 40.0;
    let prior = GaussianMixturePrior::new(
        vec![0.3, 0.7],
        vec![
            DVector::from_vec(vec![2.0, -1.0]),
            DVector::from_vec(vec![-1.0, 0.5]),
        ],
        vec![
            DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]),
            DMatrix::from_row_slice(2, 2, &[0.3, -0.1, -0.1, 0.6]),
        ],
    )?;
    let map = LatentMap::identity(2);
    let op = ForwardOperator::Identity { n: 2 };
    let cc = ConsistencyConfig::default();
    let mut out = ExperimentOutcome::new(
        "unbiasedness",
        seed,
        json!({"experiment": "unbiasedness", "steps": steps, "gamma": gamma, "draws": MC_DRAWS,
               "prior": serde_json::to_value(&prior)?, "operator": "identity", "sigma_y": 0.0}),
    );
    let results = try_map_trials(steps.len(), exec, |i| -> Result<(Vec<f64>, Vec<f64>)> {
        let t = steps[i];
        let ab = schedule.alpha_bar(t);
        let sigma2 = schedule.resample_sigma2(t, gamma)?;
        let mut rng = stream(seed, i as u64);
        let mut diffs = DMatrix::zeros(MC_DRAWS, 2);
        for r in 0..MC_DRAWS {
            // unconditional sample at level t
            let z0 = prior.sample(&mut rng);
            let zp = &z0 * ab.sqrt() + standard_normal(&mut rng, 2) * (1.0 - ab).sqrt();
            let z0_hat = tweedie_estimate(&prior, &schedule, t, &zp)?;
            // y = A(D(z0_hat)) with A o D = id and no noise, so the solve is exact
            let solved = pixel_consistency_closed_form(&map, &op, &z0_hat, &z0_hat, &cc)?;
            let z_hat = stochastic_resample_at(ab, &solved.z, &zp, sigma2, &mut rng)?;
            diffs.row_mut(r).copy_from(&(z_hat - zp).transpose());
        }
        let m = mc_moments(&diffs)?;
        Ok((
            m.mean.iter().copied().collect(),
            m.stderr_mean.iter().copied().collect(),
        ))
    })?;
    let mut ok = true;
    for (t, (mean_diff, se)) in steps.iter().zip(&results) {
        for j in 0..2 {
            out.metric(format!("t={t}/coord{j}/mean_difference"), mean_diff[j]);
            out.metric(format!("t={t}/coord{j}/stderr"), se[j]);
            ok &= mean_diff[j].abs() < 3.0 * se[j];
        }
    }
    out.check(
        "resample_is_unbiased",
        ok,
        "|mean(z_hat - z')| < 3 stderr per coordinate".into(),
    );
    Ok(out)
}

/// Terminal residual, PSNR when a truth exists, and the final latent.
type TrialResult = (f64, Option<f64>, Vec<f64>);

/// One solve per config seed `seed, seed + 1, ...`.
fn solve_trials(
    n: usize,
    seed: u64,
    exec: Execution,
    make: impl Fn(u64) -> ExperimentConfig + Sync + Send,
    solver: Solver,
) -> Result<Vec<TrialResult>> {
    try_map_trials(n, exec, |i| -> Result<TrialResult> {
        let cfg = make(seed.wrapping_add(i as u64));
        let problem = cfg.build()?;
        let mut rng = stream(cfg.seed, SAMPLER_STREAM);
        let report = problem.solve(solver, &mut rng)?;
        let metrics = problem.metrics(&report.x0)?;
        Ok((report.residual, metrics.psnr, report.x0))
    })
}

fn resample_vs_dps(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    const TRIALS: usize = 50;
    let base = presets::two_mode(seed);
    let tau = base.consistency.tau;
    let mut out = ExperimentOutcome::new(
        "resample-vs-dps",
        seed,
        json!({"experiment": "resample-vs-dps", "trials": TRIALS, "config": serde_json::to_value(&base)?}),
    );
    let res = solve_trials(TRIALS, seed, exec, presets::two_mode, Solver::Resample)?;
    let dps = solve_trials(TRIALS, seed, exec, presets::two_mode, Solver::LatentDps)?;
    let mut ratios = Vec::with_capacity(TRIALS);
    for (i, (r, d)) in res.iter().zip(&dps).enumerate() {
        out.metric(format!("trial{i:02}/residual_resample"), r.0);
        out.metric(format!("trial{i:02}/residual_latent_dps"), d.0);
        ratios.push(d.0 / r.0);
    }
    let res_residuals: Vec<f64> = res.iter().map(|r| r.0).collect();
    let dps_residuals: Vec<f64> = dps.iter().map(|r| r.0).collect();
    let med_res = median(&res_residuals);
    let med_dps = median(&dps_residuals);
    let med_ratio = median(&ratios);
    let basin = res.iter().filter(|r| r.2[0] > 0.0).count() as f64 / TRIALS as f64;
    let problem = base.build()?;
    let posterior = exact_linear_posterior(
        &problem.prior,
        &problem.map,
        &problem.op,
        &DVector::from_column_slice(&problem.measurement.y),
        problem.measurement.sigma_y,
    )?;
    out.metric("median_residual_resample", med_res);
    out.metric("median_residual_latent_dps", med_dps);
    out.metric("median_ratio_dps_over_resample", med_ratio);
    out.metric("fraction_in_positive_basin", basin);
    out.metric(
        "posterior_mass_positive_mode",
        posterior.mass_where(|m| m[0] > 0.0),
    );
    out.check(
        "dps_residual_at_least_10x",
        med_ratio >= 10.0,
        format!("median ratio {med_ratio:.4e} >= 10"),
    );
    out.check(
        "resample_residual_below_tau",
        med_res <= tau,
        format!("median residual {med_res:.4e} <= {tau:e}"),
    );
    Ok(out)
}

fn resample_vs_encode(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    const TRIALS: usize = 50;
    const SIGMA_Y: f64 = 0.05;
    let base = presets::inpainting(seed, SIGMA_Y);
    let mut out = ExperimentOutcome::new(
        "resample-vs-encode",
        seed,
        json!({"experiment": "resample-vs-encode", "trials": TRIALS, "config": serde_json::to_value(&base)?}),
    );
    let with_mode = |mode: RemapMode| {
        move |s: u64| {
            let mut cfg = presets::inpainting(s, SIGMA_Y);
            cfg.remap_mode = mode;
            cfg
        }
    };
    let res = solve_trials(
        TRIALS,
        seed,
        exec,
        with_mode(RemapMode::Resample),
        Solver::Resample,
    )?;
    let enc = solve_trials(
        TRIALS,
        seed,
        exec,
        with_mode(RemapMode::Encode),
        Solver::Resample,
    )?;
    for (i, (r, e)) in res.iter().zip(&enc).enumerate() {
        out.metric(
            format!("trial{i:02}/psnr_resample"),
            r.1.unwrap_or(f64::NAN),
        );
        out.metric(format!("trial{i:02}/psnr_encode"), e.1.unwrap_or(f64::NAN));
        out.metric(format!("trial{i:02}/residual_resample"), r.0);
        out.metric(format!("trial{i:02}/residual_encode"), e.0);
    }
    let col = |v: &[(f64, Option<f64>, Vec<f64>)], psnr: bool| -> Vec<f64> {
        v.iter()
            .map(|r| if psnr { r.1.unwrap_or(f64::NAN) } else { r.0 })
            .collect()
    };
    let (pr, pe) = (mean(&col(&res, true)), mean(&col(&enc, true)));
    let (rr, re) = (mean(&col(&res, false)), mean(&col(&enc, false)));
    out.metric("mean_psnr_resample", pr);
    out.metric("mean_psnr_encode", pe);
    out.metric("mean_residual_resample", rr);
    out.metric("mean_residual_encode", re);
    out.check(
        "resample_psnr_at_least_encode",
        pr >= pe,
        format!("{pr:.4} dB >= {pe:.4} dB"),
    );
    out.check(
        "resample_residual_at_most_encode",
        rr <= re,
        format!("{rr:.4e} <= {re:.4e}"),
    );
    Ok(out)
}

fn skip_step_sweep(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    const TRIALS: usize = 20;
    let skips = [1usize, 10, 50, 200];
    let mut out = ExperimentOutcome::new(
        "skip-step-sweep",
        seed,
        json!({"experiment": "skip-step-sweep", "trials": TRIALS, "skips": skips,
               "config": serde_json::to_value(presets::two_mode(seed))?}),
    );
    let mut medians = Vec::new();
    for &skip in &skips {
        let runs = solve_trials(
            TRIALS,
            seed,
            exec,
            move |s| {
                let mut cfg = presets::two_mode(s);
                cfg.timetable.skip = skip;
                cfg
            },
            Solver::Resample,
        )?;
        let residuals: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let m = median(&residuals);
        out.metric(format!("skip={skip}/median_residual"), m);
        medians.push(m);
    }
    let monotone = medians.windows(2).all(|w| w[1] >= w[0]);
    out.check(
        "residual_non_decreasing_in_skip",
        monotone,
        format!("medians {medians:?}"),
    );
    Ok(out)
}

fn gamma_sweep(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    const TRIALS: usize = 20;
    let gammas = [0.1, 1.0, 10.0, 40.0];
    let mut out = ExperimentOutcome::new(
        "gamma-sweep",
        seed,
        json!({"experiment": "gamma-sweep", "trials": TRIALS, "gammas": gammas,
               "config": serde_json::to_value(presets::two_mode(seed))?}),
    );
    let mut medians = Vec::new();
    for &gamma in &gammas {
        let runs = solve_trials(
            TRIALS,
            seed,
            exec,
            move |s| {
                let mut cfg = presets::two_mode(s);
                cfg.gamma = gamma;
                cfg
            },
            Solver::Resample,
        )?;
        let residuals: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let m = median(&residuals);
        out.metric(format!("gamma={gamma}/median_residual"), m);
        medians.push(m);
    }
    let (lo, hi) = (medians[0], medians[3]);
    out.check(
        "gamma_40_no_worse_than_0_1",
        hi <= lo,
        format!("{hi:.3e} <= {lo:.3e}"),
    );
    Ok(out)
}

fn diverged(e: &Error) -> bool {
    match e {
        Error::NonFinite { .. } => true,
        Error::AtStep { source, .. } => diverged(source),
        _ => false,
    }
}

fn ct_bench(seed: u64, exec: Execution) -> Result<ExperimentOutcome> {
    let cfg = presets::ct(seed);
    let mut out = ExperimentOutcome::new(
        "ct-bench",
        seed,
        json!({"experiment": "ct-bench", "config": serde_json::to_value(&cfg)?}),
    );
    let problem = cfg.build()?;
    let solvers = [Solver::Fbp, Solver::Resample, Solver::LatentDps];
    let results = try_map_trials(solvers.len(), exec, |i| -> Result<_> {
        let mut rng = stream(cfg.seed, SAMPLER_STREAM);
        match problem.solve(solvers[i], &mut rng) {
            Ok(report) => problem.metrics(&report.x0).map(Some),
            Err(e) if diverged(&e) => Ok(None),
            Err(e) => Err(e),
        }
    })?;
    for (solver, m) in solvers.iter().zip(&results) {
        match m {
            Some(m) => {
                out.metric(
                    format!("{}/psnr", solver.name()),
                    m.psnr.unwrap_or(f64::NAN),
                );
                out.metric(
                    format!("{}/ssim", solver.name()),
                    m.ssim.unwrap_or(f64::NAN),
                );
                out.metric(format!("{}/residual", solver.name()), m.residual);
                out.metric(format!("{}/diverged", solver.name()), 0.0);
            }
            None => out.metric(format!("{}/diverged", solver.name()), 1.0),
        }
    }
    let psnr_of = |i: usize| results[i].as_ref().and_then(|m| m.psnr).unwrap_or(f64::NAN);
    let (fbp, res) = (psnr_of(0), psnr_of(1));
    out.check(
        "resample_beats_fbp_by_3db",
        res >= fbp + 3.0,
        format!("{res:.3} dB >= {fbp:.3} + 3 dB"),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
    }

    #[test]
    fn unknown_experiment_is_an_error() {
        assert!(matches!(
            run_experiment("nope", 0, Execution::Sequential),
            Err(Error::UnknownExperiment(_))
        ));
    }

    #[test]
    fn csv_rows_carry_provenance() {
        let out = run_experiment("tweedie-exactness", 3, Execution::Sequential).unwrap();
        let rows = out.csv_rows();
        assert!(rows
            .iter()
            .all(|r| r.seed == 3 && r.config_hash == out.config_hash));
        assert!(rows
            .iter()
            .any(|r| r.metric == "check:tweedie_matches_posterior_mean"));
    }
}
