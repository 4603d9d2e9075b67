use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Needs a ground truth.
    pub psnr: Option<f64>,
    /// Only defined for images at least one window wide.
    pub ssim: Option<f64>,
    /// `0.5 ||y - A(x)||^2`.
    pub residual: f64,
}

/// `10 log10(peak^2 / MSE)`, capped at 100 dB.
pub fn psnr(x: &[f64], reference: &[f64], peak: f64) -> Result<f64> {
    if x.len() != reference.len() {
        return Err(Error::dim(reference.len(), x.len(), "psnr input"));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("psnr of an empty signal".into()));
    }
    let mse = x
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Mean structural similarity over every fully contained Gaussian window.
pub fn ssim(
    x: &[f64],
    reference: &[f64],
    height: usize,
    width: usize,
    params: SsimParams,
) -> Result<f64> {
    let n = height * width;
    if x.len() != n || reference.len() != n {
        return Err(Error::dim(n, x.len().max(reference.len()), "ssim image"));
    }
    let w = params.window;
    if w == 0 || height < w || width < w {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images at least {w}x{w}, got {height}x{width}"
        )));
    }
    let c = (w / 2) as f64;
    let mut g: Vec<f64> = (0..w)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * params.sigma * params.sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);

    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let (oh, ow) = (height - w + 1, width - w + 1);
    let mut acc = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..w {
                for b in 0..w {
                    let k = g[a] * g[b];
                    let idx = (i + a) * width + j + b;
                    let (u, v) = (x[idx], reference[idx]);
                    mx += k * u;
                    my += k * v;
                    sxx += k * u * u;
                    syy += k * v * v;
                    sxy += k * u * v;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(acc / (oh * ow) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct McMoments {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub cov: DMatrix<f64>,
    /// `sqrt(diag(cov) / N)`.
    pub stderr_mean: DVector<f64>,
}

/// Two-pass sample moments of the rows of `samples` (N x d).
pub fn mc_moments(samples: &DMatrix<f64>) -> Result<McMoments> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "moments need at least 2 samples, got {n}"
        )));
    }
    let mean = DVector::from_fn(d, |j, _| samples.column(j).sum() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for row in samples.row_iter() {
        let diff = row.transpose() - &mean;
        cov.ger(1.0, &diff, &diff, 1.0);
    }
    cov /= (n - 1) as f64;
    let stderr_mean = DVector::from_fn(d, |j, _| (cov[(j, j)] / n as f64).sqrt());
    Ok(McMoments {
        mean,
        cov,
        stderr_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream};

    #[test]
    fn psnr_cases() {
        let x = vec![0.2; 16];
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 100.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&shifted, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&x, &x[..3], 1.0).is_err());
    }

    #[test]
    fn psnr_detects_constant_shift() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        for c in [0.5, 0.25, 0.03125] {
            let y: Vec<f64> = x.iter().map(|v| v + c).collect();
            let expected = 10.0 * (1.0 / (c * c)).log10();
            assert!((psnr(&y, &x, 1.0).unwrap() - expected).abs() < 1e-12);
        }
    }

    fn checkerboard(side: usize, cell: usize) -> Vec<f64> {
        (0..side * side)
            .map(|k| {
                if ((k / side) / cell + (k % side) / cell).is_multiple_of(2) {
                    0.8
                } else {
                    0.2
                }
            })
            .collect()
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let img = checkerboard(16, 4);
        let p = SsimParams::default();
        assert!((ssim(&img, &img, 16, 16, p).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<f64> = img.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&inv, &img, 16, 16, p).unwrap() < 1.0);
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let img = checkerboard(24, 3);
        let mut rng = stream(5, 0);
        let base = standard_normal(&mut rng, img.len());
        let scores: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|s| {
                let noisy: Vec<f64> = img
                    .iter()
                    .zip(base.iter())
                    .map(|(v, e)| v + s * e)
                    .collect();
                ssim(&noisy, &img, 24, 24, SsimParams::default()).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn ssim_is_symmetric_and_checks_size() {
        let mut rng = stream(6, 0);
        let a: Vec<f64> = standard_normal(&mut rng, 144).iter().copied().collect();
        let b: Vec<f64> = standard_normal(&mut rng, 144).iter().copied().collect();
        let p = SsimParams::default();
        assert!(
            (ssim(&a, &b, 12, 12, p).unwrap() - ssim(&b, &a, 12, 12, p).unwrap()).abs() < 1e-12
        );
        assert!(ssim(&a[..100], &b[..100], 10, 10, p).is_err());
    }

    #[test]
    fn moments_small_cases() {
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let m = mc_moments(&same).unwrap();
        assert_eq!(m.cov, DMatrix::zeros(2, 2));
        let pm = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let m = mc_moments(&pm).unwrap();
        assert_eq!(m.mean[0], 0.0);
        assert_eq!(m.cov[(0, 0)], 2.0);
        assert!(mc_moments(&DMatrix::zeros(1, 3)).is_err());
    }
}
