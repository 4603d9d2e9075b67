//! Hard data consistency: find a latent that explains the measurements.
//!
//! Two routes. Latent optimization runs a bias-corrected adaptive-moment
//! descent on `f(z) = 0.5 ||y - A(D(z))||^2` and stops as soon as `f <= tau`.
//! Pixel optimization projects `D(z)` onto the measurement-consistent affine
//! set with a (possibly relaxed) pseudo-inverse and maps back through the
//! encoder; it needs a linear operator.

pub mod cg;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentmap::{Encoded, LatentMap};
use crate::operators::ForwardOperator;

pub use cg::{cg_solve, cgls_solve, CgOutcome};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub tau: f64,
    pub max_iters_latent: usize,
    pub max_iters_pixel: usize,
    pub step_size: f64,
    pub kappa: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            tau: 1e-4,
            max_iters_latent: 500,
            max_iters_pixel: 2000,
            step_size: 1e-2,
            kappa: 0.9,
            cg_iters: 50,
            cg_tol: 1e-10,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidArgument("tau must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::InvalidArgument("kappa must lie in [0, 1]".into()));
        }
        if self.max_iters_latent == 0 || self.max_iters_pixel == 0 || self.cg_iters == 0 {
            return Err(Error::InvalidArgument("iteration caps must be >= 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidArgument("step size must be > 0".into()));
        }
        Ok(())
    }
}

/// `0.5 ||y - A(D(z))||^2`.
pub fn data_loss(
    map: &LatentMap,
    op: &ForwardOperator,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64> {
    let x = map.decode(z)?;
    Ok(0.5 * (op.apply(&x)? - y).norm_squared())
}

/// Loss and its gradient `J_D^T J_A^T (A(D(z)) - y)`.
pub fn data_loss_grad(
    map: &LatentMap,
    op: &ForwardOperator,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let x = map.decode(z)?;
    let r = op.apply(&x)? - y;
    let pixel_grad = op.jacobian_tvp(&x, &r)?;
    Ok((0.5 * r.norm_squared(), map.decode_vjp(z, &pixel_grad)?))
}

#[derive(Clone, Debug)]
pub struct LatentSolve {
    pub z: DVector<f64>,
    /// Best loss so far, first entry is the loss at the initial point.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub reached_tau: bool,
}

impl LatentSolve {
    pub fn loss(&self) -> f64 {
        *self.trace.last().expect("trace holds the initial loss")
    }
}

/// Adaptive-moment descent on the measurement loss with cosine step decay;
/// returns the best iterate seen.
pub fn latent_consistency(
    map: &LatentMap,
    op: &ForwardOperator,
    y: &DVector<f64>,
    z_init: &DVector<f64>,
    cfg: &ConsistencyConfig,
) -> Result<LatentSolve> {
    if y.len() != op.m() {
        return Err(Error::dim(op.m(), y.len(), "measurement"));
    }
    let (mut loss, mut grad) = data_loss_grad(map, op, y, z_init)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "initial consistency loss".into(),
            last_finite: None,
        });
    }
    let mut best = z_init.clone();
    let mut best_loss = loss;
    let mut trace = vec![loss];
    if loss <= cfg.tau {
        return Ok(LatentSolve {
            z: best,
            trace,
            iterations: 0,
            reached_tau: true,
        });
    }
    let d = z_init.len();
    let mut z = z_init.clone();
    let mut m = DVector::zeros(d);
    let mut v = DVector::zeros(d);
    let cap = cfg.max_iters_latent;
    let mut iterations = 0;
    for k in 1..=cap {
        m = &m * BETA1 + &grad * (1.0 - BETA1);
        v = &v * BETA2 + grad.map(|g| g * g) * (1.0 - BETA2);
        let m_hat = &m / (1.0 - BETA1.powi(k as i32));
        let v_hat = &v / (1.0 - BETA2.powi(k as i32));
        let lr = cfg.step_size
            * 0.5
            * (1.0 + (std::f64::consts::PI * (k - 1) as f64 / cap as f64).cos());
        z -= m_hat.zip_map(&v_hat, |mh, vh| lr * mh / (vh.sqrt() + ADAM_EPS));
        (loss, grad) = data_loss_grad(map, op, y, &z)?;
        iterations = k;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("consistency loss at iteration {k}"),
                last_finite: Some(best.iter().copied().collect()),
            });
        }
        if loss < best_loss {
            best_loss = loss;
            best.copy_from(&z);
        }
        trace.push(best_loss);
        if best_loss <= cfg.tau {
            break;
        }
    }
    Ok(LatentSolve {
        z: best,
        trace,
        iterations,
        reached_tau: best_loss <= cfg.tau,
    })
}

#[derive(Clone, Debug)]
pub struct PixelSolve {
    pub z: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub encoded: Encoded,
}

/// `x_hat = x0 - kappa * A^+ (A x0 - y)` with `x0 = D(z_est)`, then `E(x_hat)`.
pub fn pixel_projection(
    map: &LatentMap,
    op: &ForwardOperator,
    y: &DVector<f64>,
    z_est: &DVector<f64>,
    kappa: f64,
    cg_iters: usize,
    cg_tol: f64,
) -> Result<PixelSolve> {
    if !op.is_linear() {
        return Err(Error::Unsupported {
            op: "pixel consistency",
            kind: op.kind_name().into(),
        });
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!(
            "kappa must lie in [0, 1], got {kappa}"
        )));
    }
    let x0 = map.decode(z_est)?;
    let r = op.apply(&x0)? - y;
    let x_hat = if kappa == 0.0 {
        x0
    } else {
        let correction = op.pseudoinverse_apply(&r, cg_iters, cg_tol)?;
        x0 - correction * kappa
    };
    let encoded = map.encode(&x_hat)?;
    if !encoded.converged {
        log::warn!(
            "encoder did not converge after pixel projection (gradient {:e})",
            encoded.grad_norm
        );
    }
    Ok(PixelSolve {
        z: encoded.z.clone(),
        x_hat,
        encoded,
    })
}

/// Exact (noiseless) projection: `kappa = 1` and an inner solve run to tight tolerance.
pub fn pixel_consistency_closed_form(
    map: &LatentMap,
    op: &ForwardOperator,
    y: &DVector<f64>,
    z_est: &DVector<f64>,
    cfg: &ConsistencyConfig,
) -> Result<PixelSolve> {
    let iters = cfg.max_iters_pixel.max(2 * op.m());
    pixel_projection(map, op, y, z_est, 1.0, iters, 1e-13)
}

/// Relaxed projection with `cfg.kappa` and `cfg.cg_iters` inner iterations.
pub fn pixel_consistency_cg(
    map: &LatentMap,
    op: &ForwardOperator,
    y: &DVector<f64>,
    z_est: &DVector<f64>,
    cfg: &ConsistencyConfig,
) -> Result<PixelSolve> {
    pixel_projection(map, op, y, z_est, cfg.kappa, cfg.cg_iters, cfg.cg_tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream};

    fn select_first() -> (LatentMap, ForwardOperator) {
        (
            LatentMap::identity(2),
            ForwardOperator::mask(2, vec![0]).unwrap(),
        )
    }

    #[test]
    fn separable_quadratic_moves_only_the_measured_coordinate() {
        let (map, op) = select_first();
        let y = DVector::from_vec(vec![3.0]);
        let cfg = ConsistencyConfig {
            tau: 1e-12,
            max_iters_latent: 3000,
            step_size: 0.05,
            ..Default::default()
        };
        let out = latent_consistency(&map, &op, &y, &DVector::zeros(2), &cfg).unwrap();
        assert!(out.reached_tau, "final loss {}", out.loss());
        assert!((out.z[0] - 3.0).abs() < 2e-6);
        assert_eq!(out.z[1], 0.0);
    }

    #[test]
    fn early_stop_takes_precedence() {
        let (map, op) = select_first();
        let y = DVector::from_vec(vec![1.0]);
        let z = DVector::from_vec(vec![1.005, 7.0]);
        let out = latent_consistency(&map, &op, &y, &z, &ConsistencyConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.z, z);
    }

    #[test]
    fn trace_is_monotone_and_best_is_returned() {
        let map = LatentMap::seeded_mlp(3, 8, 2).unwrap();
        let op = ForwardOperator::random_mask(8, 0.5, 1).unwrap();
        let mut rng = stream(3, 3);
        let truth = standard_normal(&mut rng, 3);
        let y = op.apply(&map.decode(&truth).unwrap()).unwrap();
        let init = standard_normal(&mut rng, 3);
        let out = latent_consistency(&map, &op, &y, &init, &ConsistencyConfig::default()).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.loss() <= out.trace[0]);
        assert!((data_loss(&map, &op, &y, &out.z).unwrap() - out.loss()).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let map = LatentMap::seeded_mlp(3, 9, 5).unwrap();
        let op = ForwardOperator::NonlinearBlur {
            blur: crate::operators::CircularBlur::gaussian(3, 3, 3, 0.7).unwrap(),
            gain: 3.0,
        };
        let mut rng = stream(4, 4);
        let y = standard_normal(&mut rng, 9) * 0.3;
        for _ in 0..20 {
            let z = standard_normal(&mut rng, 3);
            let (_, g) = data_loss_grad(&map, &op, &y, &z).unwrap();
            let h = 1e-6;
            let mut fd = DVector::zeros(3);
            for i in 0..3 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                fd[i] = (data_loss(&map, &op, &y, &zp).unwrap()
                    - data_loss(&map, &op, &y, &zm).unwrap())
                    / (2.0 * h);
            }
            assert!((&g - &fd).norm() / g.norm().max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn identity_projection_returns_measurement() {
        let map = LatentMap::identity(4);
        let op = ForwardOperator::Identity { n: 4 };
        let y = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4]);
        let z = DVector::from_vec(vec![5.0, 5.0, 5.0, 5.0]);
        let out = pixel_consistency_closed_form(&map, &op, &y, &z, &ConsistencyConfig::default())
            .unwrap();
        assert!((out.x_hat - &y).amax() < 1e-12);
    }

    #[test]
    fn mask_projection_agrees_on_kept_entries() {
        let map = LatentMap::identity(5);
        let op = ForwardOperator::mask(5, vec![1, 3]).unwrap();
        let truth = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = op.apply(&truth).unwrap();
        let z = DVector::from_vec(vec![0.0, -1.0, 0.5, 9.0, 0.0]);
        let out = pixel_consistency_closed_form(&map, &op, &y, &z, &ConsistencyConfig::default())
            .unwrap();
        assert_eq!(out.x_hat[1], 2.0);
        assert_eq!(out.x_hat[3], 4.0);
        assert_eq!(out.x_hat[0], 0.0);
    }

    #[test]
    fn pixel_routes_reject_nonlinear_operators() {
        let map = LatentMap::identity(4);
        let op = ForwardOperator::NonlinearBlur {
            blur: crate::operators::CircularBlur::gaussian(2, 2, 1, 1.0).unwrap(),
            gain: 3.0,
        };
        let y = DVector::zeros(4);
        let err =
            pixel_consistency_cg(&map, &op, &y, &y, &ConsistencyConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Unsupported { .. }));
    }

    #[test]
    fn kappa_limits() {
        let map = LatentMap::random_linear(3, 6, 1, 1.0).unwrap();
        let op = ForwardOperator::random_mask(6, 0.5, 2).unwrap();
        let mut rng = stream(6, 6);
        let z = standard_normal(&mut rng, 3);
        let y = standard_normal(&mut rng, 3);
        let mut cfg = ConsistencyConfig {
            kappa: 0.0,
            cg_tol: 1e-14,
            ..Default::default()
        };
        let zero = pixel_consistency_cg(&map, &op, &y, &z, &cfg).unwrap();
        assert!((zero.z - &z).amax() < 1e-10);
        cfg.kappa = 1.0;
        let full = pixel_consistency_cg(&map, &op, &y, &z, &cfg).unwrap();
        let closed = pixel_consistency_closed_form(&map, &op, &y, &z, &cfg).unwrap();
        assert!((full.z - closed.z).amax() < 1e-10);
    }

    #[test]
    fn config_validation() {
        assert!(ConsistencyConfig::default().validate().is_ok());
        let bad = ConsistencyConfig {
            kappa: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ConsistencyConfig {
            max_iters_latent: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
