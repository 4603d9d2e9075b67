use nalgebra::{DMatrix, DVector};

use resample_core::config::{presets, SAMPLER_STREAM};
use resample_core::latentmap::LatentMap;
use resample_core::metrics::mc_moments;
use resample_core::operators::{ForwardOperator, Measurement};
use resample_core::optim::{pixel_consistency_closed_form, pixel_projection, ConsistencyConfig};
use resample_core::parallel::{map_trials, Execution};
use resample_core::prior::GaussianMixturePrior;
use resample_core::rng::stream;
use resample_core::sampler::{
    ddim_sample, latent_dps_solve, resample_solve, LatentDpsConfig, SamplerConfig,
};
use resample_core::schedule::{NoiseSchedule, ResampleTimetable};

fn two_mode() -> (
    GaussianMixturePrior,
    LatentMap,
    ForwardOperator,
    Measurement,
) {
    let prior = GaussianMixturePrior::isotropic(
        vec![0.5, 0.5],
        vec![
            DVector::from_vec(vec![3.0, 0.0]),
            DVector::from_vec(vec![-3.0, 0.0]),
        ],
        1.0,
    )
    .unwrap();
    let op = ForwardOperator::mask(2, vec![0]).unwrap();
    let y = Measurement {
        y: vec![3.02],
        sigma_y: 0.01,
        operator_id: op.kind_name().into(),
    };
    (prior, LatentMap::identity(2), op, y)
}

fn schedule(steps: usize) -> NoiseSchedule {
    NoiseSchedule::linear(steps, 1e-4, 0.02, 0.0).unwrap()
}

#[test]
fn empty_resample_set_reproduces_ddim() {
    let (prior, map, op, y) = two_mode();
    let s = schedule(200);
    let cfg = SamplerConfig::new(s.clone(), ResampleTimetable::unconditional(&s), 40.0);
    for seed in 0..5 {
        let report = resample_solve(&prior, &map, &op, &y, &cfg, &mut stream(seed, 1)).unwrap();
        let ddim = ddim_sample(&prior, &s, &mut stream(seed, 1)).unwrap();
        assert_eq!(report.z0, ddim.iter().copied().collect::<Vec<_>>());
    }
}

#[test]
fn zero_step_dps_is_unconditional() {
    let (prior, map, op, y) = two_mode();
    let s = NoiseSchedule::linear(200, 1e-4, 0.02, 1.0).unwrap();
    let mut cfg = SamplerConfig::new(s.clone(), ResampleTimetable::unconditional(&s), 40.0);
    cfg.latent_dps = Some(LatentDpsConfig { zeta_scale: 0.0 });
    let report = latent_dps_solve(&prior, &map, &op, &y, &cfg, &mut stream(9, 1)).unwrap();
    let ddim = ddim_sample(&prior, &s, &mut stream(9, 1)).unwrap();
    assert_eq!(report.z0, ddim.iter().copied().collect::<Vec<_>>());
}

#[test]
fn solves_are_deterministic() {
    let problem = presets::two_mode(4).build().unwrap();
    let a = problem.sampler.clone();
    let run = || {
        resample_solve(
            &problem.prior,
            &problem.map,
            &problem.op,
            &problem.measurement,
            &a,
            &mut stream(4, SAMPLER_STREAM),
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn two_mode_lands_in_the_positive_basin() {
    let problem = presets::two_mode(0).build().unwrap();
    let reports = map_trials(20, Execution::default(), |i| {
        let mut rng = stream(i as u64, SAMPLER_STREAM);
        resample_solve(
            &problem.prior,
            &problem.map,
            &problem.op,
            &problem.measurement,
            &problem.sampler,
            &mut rng,
        )
        .unwrap()
    });
    assert!(reports.iter().all(|r| r.x0[0] > 0.0));
    assert!(reports
        .iter()
        .all(|r| r.steps.len() == problem.sampler.schedule.steps() - 1));
}

#[test]
fn ddim_matches_gaussian_moments() {
    let mean = DVector::from_vec(vec![1.0, -0.5]);
    let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3]);
    let prior =
        GaussianMixturePrior::new(vec![1.0], vec![mean.clone()], vec![cov.clone()]).unwrap();
    let s = schedule(1000);
    const N: usize = 20_000;
    let draws = map_trials(N, Execution::default(), |i| {
        ddim_sample(&prior, &s, &mut stream(31, i as u64)).unwrap()
    });
    let samples = DMatrix::from_fn(N, 2, |i, j| draws[i][j]);
    let m = mc_moments(&samples).unwrap();
    for j in 0..2 {
        assert!(
            (m.mean[j] - mean[j]).abs() < 4.0 * m.stderr_mean[j],
            "{:?}",
            m.mean
        );
    }
    // deterministic DDIM contracts slightly; allow 5% on the covariance
    assert!((&m.cov - &cov).amax() < 0.05 * cov.amax(), "{}", m.cov);
}

#[test]
fn closed_form_projection_satisfies_the_constraint() {
    let map = LatentMap::random_linear(4, 16, 17, 0.5).unwrap();
    let op = ForwardOperator::random_mask(16, 0.5, 23).unwrap();
    let y = DVector::from_fn(op.m(), |i, _| (i as f64 * 0.37).sin());
    let z = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.4]);
    let out =
        pixel_consistency_closed_form(&map, &op, &y, &z, &ConsistencyConfig::default()).unwrap();
    assert!((op.apply(&out.x_hat).unwrap() - &y).norm() < 1e-8);
}

#[test]
fn kappa_interpolates_the_residual() {
    let map = LatentMap::random_linear(4, 16, 17, 0.5).unwrap();
    let op = ForwardOperator::random_mask(16, 0.5, 23).unwrap();
    let y = DVector::from_fn(op.m(), |i, _| (i as f64 * 0.37).cos());
    let z = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.4]);
    let residuals: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0]
        .iter()
        .map(|&k| {
            let out = pixel_projection(&map, &op, &y, &z, k, 200, 1e-13).unwrap();
            (op.apply(&out.x_hat).unwrap() - &y).norm()
        })
        .collect();
    assert!(
        residuals.windows(2).all(|w| w[1] <= w[0] + 1e-12),
        "{residuals:?}"
    );
    assert!(
        residuals[4] < residuals[0] && residuals[4] > residuals[5],
        "{residuals:?}"
    );
}

#[test]
fn in_loop_tweedie_check_passes() {
    let mut cfg = presets::inpainting(2, 0.05);
    cfg.check_tweedie = true;
    let problem = cfg.build().unwrap();
    let report = problem
        .solve(cfg.solver, &mut stream(2, SAMPLER_STREAM))
        .unwrap();
    assert!(report.residual.is_finite());
}
