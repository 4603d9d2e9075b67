//! Conjugate gradients on SPD systems and CGLS on least-squares problems.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Residual norm after each iteration, starting with the initial residual.
    pub trace: Vec<f64>,
}

/// Solves `M x = b` for symmetric positive-definite `M`, starting at zero.
/// Stops when `||b - M x|| <= tol` or after `iters` iterations.
pub fn cg_solve<F>(matvec: F, b: &DVector<f64>, iters: usize, tol: f64) -> Result<CgOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let mut trace = vec![rr.sqrt()];
    let mut k = 0;
    while k < iters && rr.sqrt() > tol {
        let mp = matvec(&p);
        let curvature = p.dot(&mp);
        if !(curvature > 0.0) {
            return Err(Error::Breakdown {
                iteration: k,
                curvature,
                trace,
            });
        }
        let step = rr / curvature;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &mp, 1.0);
        let rr_next = r.norm_squared();
        p = &r + &p * (rr_next / rr);
        rr = rr_next;
        k += 1;
        trace.push(rr.sqrt());
    }
    Ok(CgOutcome {
        x,
        iterations: k,
        residual_norm: rr.sqrt(),
        trace,
    })
}

/// CGLS for `min ||A x - b||` given `A` and `A^T` actions, starting at zero,
/// so it converges to the minimum-norm solution. Stops when the normal-equation
/// residual `||A^T (b - A x)||` drops to `tol`.
pub fn cgls_solve<F, G>(
    matvec: F,
    rmatvec: G,
    b: &DVector<f64>,
    iters: usize,
    tol: f64,
) -> Result<CgOutcome>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut r = b.clone();
    let mut s = rmatvec(&r);
    let mut x = DVector::zeros(s.len());
    let mut p = s.clone();
    let mut gamma = s.norm_squared();
    let mut trace = vec![gamma.sqrt()];
    let mut k = 0;
    while k < iters && gamma.sqrt() > tol {
        let q = matvec(&p);
        let curvature = q.norm_squared();
        if !(curvature > 0.0) {
            return Err(Error::Breakdown {
                iteration: k,
                curvature,
                trace,
            });
        }
        let step = gamma / curvature;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &q, 1.0);
        s = rmatvec(&r);
        let gamma_next = s.norm_squared();
        p = &s + &p * (gamma_next / gamma);
        gamma = gamma_next;
        k += 1;
        trace.push(gamma.sqrt());
    }
    Ok(CgOutcome {
        x,
        iterations: k,
        residual_norm: gamma.sqrt(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream};
    use nalgebra::DMatrix;

    #[test]
    fn scaled_identity_in_one_iteration() {
        let b = DVector::from_vec(vec![1.0, -4.0, 2.5]);
        let out = cg_solve(|v| v * 2.0, &b, 10, 1e-12).unwrap();
        assert_eq!(out.iterations, 1);
        assert!((out.x - &b / 2.0).amax() < 1e-15);
        let out = cgls_solve(|v| v * 2.0, |v| v * 2.0, &b, 10, 1e-12).unwrap();
        assert_eq!(out.iterations, 1);
        assert!((out.x - &b / 2.0).amax() < 1e-15);
    }

    #[test]
    fn zero_rhs_needs_no_iterations() {
        let b = DVector::zeros(4);
        let out = cg_solve(|v| v * 3.0, &b, 10, 1e-12).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, b);
    }

    #[test]
    fn random_spd_matches_dense_solve() {
        let mut rng = stream(8, 8);
        let a = DMatrix::from_iterator(8, 8, standard_normal(&mut rng, 64).iter().copied());
        let spd = &a * a.transpose() + DMatrix::identity(8, 8);
        let b = standard_normal(&mut rng, 8);
        let direct = spd.clone().cholesky().unwrap().solve(&b);
        let out = cg_solve(|v| &spd * v, &b, 100, 1e-13).unwrap();
        assert!((out.x - direct).amax() < 1e-9);
    }

    #[test]
    fn indefinite_operator_breaks_down() {
        let b = DVector::from_vec(vec![1.0, 0.0]);
        let err = cg_solve(|v| -v, &b, 10, 1e-12).unwrap_err();
        assert!(matches!(err, Error::Breakdown { iteration: 0, .. }));
    }
}
