//! Forward measurement operators `y = A(x) + noise`.

mod blur;
mod radon;

pub use blur::CircularBlur;
pub use radon::Radon;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::cg::{cg_solve, CgOutcome};
use crate::rng::{standard_normal, stream};

/// Tikhonov damping used when inverting `A A^T` for the Radon transform.
pub const RADON_DAMPING: f64 = 1e-6;

#[derive(Clone, Debug)]
pub enum ForwardOperator {
    Identity {
        n: usize,
    },
    /// Keeps the listed pixel indices (sorted, unique).
    Mask {
        n: usize,
        keep: Vec<usize>,
    },
    /// Drops a rectangular region of a `height x width` image.
    BoxMask {
        height: usize,
        width: usize,
        keep: Vec<usize>,
    },
    /// Block averaging by `factor` along every axis of `dims`.
    Downsample {
        dims: Vec<usize>,
        factor: usize,
    },
    GaussianBlur(CircularBlur),
    Radon(Radon),
    /// `tanh(gain * K x)` with `K` a circular Gaussian blur.
    NonlinearBlur {
        blur: CircularBlur,
        gain: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity {
        n: usize,
    },
    Mask {
        n: usize,
        #[serde(default)]
        keep: Option<Vec<usize>>,
        #[serde(default)]
        keep_fraction: Option<f64>,
        #[serde(default)]
        seed: u64,
    },
    BoxMask {
        height: usize,
        width: usize,
        top: usize,
        left: usize,
        box_height: usize,
        box_width: usize,
    },
    Downsample {
        dims: Vec<usize>,
        factor: usize,
    },
    GaussianBlur {
        height: usize,
        width: usize,
        size: usize,
        sigma: f64,
    },
    Radon {
        grid: usize,
        n_angles: usize,
        #[serde(default)]
        n_detectors: Option<usize>,
    },
    NonlinearBlur {
        height: usize,
        width: usize,
        size: usize,
        sigma: f64,
        #[serde(default = "default_gain")]
        gain: f64,
    },
}

fn default_gain() -> f64 {
    3.0
}

/// A noisy observation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Measurement {
    pub y: Vec<f64>,
    pub sigma_y: f64,
    pub operator_id: String,
}

impl ForwardOperator {
    pub fn mask(n: usize, mut keep: Vec<usize>) -> Result<Self> {
        keep.sort_unstable();
        keep.dedup();
        if keep.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("mask index out of range".into()));
        }
        if keep.is_empty() {
            return Err(Error::InvalidArgument("mask keeps no entries".into()));
        }
        Ok(ForwardOperator::Mask { n, keep })
    }

    /// Keeps `round(fraction * n)` indices drawn without replacement.
    pub fn random_mask(n: usize, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let count = ((fraction * n as f64).round() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream(seed, 0));
        idx.truncate(count);
        Self::mask(n, idx)
    }

    pub fn box_mask(
        height: usize,
        width: usize,
        top: usize,
        left: usize,
        box_height: usize,
        box_width: usize,
    ) -> Result<Self> {
        if top + box_height > height || left + box_width > width {
            return Err(Error::InvalidArgument("box exceeds the image".into()));
        }
        let keep: Vec<usize> = (0..height * width)
            .filter(|&p| {
                let (r, c) = (p / width, p % width);
                !(r >= top && r < top + box_height && c >= left && c < left + box_width)
            })
            .collect();
        if keep.is_empty() {
            return Err(Error::InvalidArgument("box covers the whole image".into()));
        }
        Ok(ForwardOperator::BoxMask {
            height,
            width,
            keep,
        })
    }

    pub fn downsample(dims: Vec<usize>, factor: usize) -> Result<Self> {
        if factor == 0 || dims.is_empty() || dims.len() > 2 {
            return Err(Error::InvalidArgument(
                "downsampling needs 1 or 2 dims and factor >= 1".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0 || d % factor != 0) {
            return Err(Error::InvalidArgument(format!(
                "dims {dims:?} not divisible by factor {factor}"
            )));
        }
        Ok(ForwardOperator::Downsample { dims, factor })
    }

    pub fn radon(grid: usize, n_angles: usize, n_detectors: usize) -> Result<Self> {
        Ok(ForwardOperator::Radon(Radon::new(
            grid,
            n_angles,
            n_detectors,
        )?))
    }

    pub fn from_spec(spec: &OperatorSpec) -> Result<Self> {
        match spec {
            OperatorSpec::Identity { n } => Ok(ForwardOperator::Identity { n: *n }),
            OperatorSpec::Mask {
                n,
                keep,
                keep_fraction,
                seed,
            } => match (keep, keep_fraction) {
                (Some(k), None) => Self::mask(*n, k.clone()),
                (None, Some(f)) => Self::random_mask(*n, *f, *seed),
                _ => Err(Error::InvalidArgument(
                    "mask needs exactly one of `keep` or `keep_fraction`".into(),
                )),
            },
            OperatorSpec::BoxMask {
                height,
                width,
                top,
                left,
                box_height,
                box_width,
            } => Self::box_mask(*height, *width, *top, *left, *box_height, *box_width),
            OperatorSpec::Downsample { dims, factor } => Self::downsample(dims.clone(), *factor),
            OperatorSpec::GaussianBlur {
                height,
                width,
                size,
                sigma,
            } => Ok(ForwardOperator::GaussianBlur(CircularBlur::gaussian(
                *height, *width, *size, *sigma,
            )?)),
            OperatorSpec::Radon {
                grid,
                n_angles,
                n_detectors,
            } => Self::radon(*grid, *n_angles, n_detectors.unwrap_or(*grid)),
            OperatorSpec::NonlinearBlur {
                height,
                width,
                size,
                sigma,
                gain,
            } => Ok(ForwardOperator::NonlinearBlur {
                blur: CircularBlur::gaussian(*height, *width, *size, *sigma)?,
                gain: *gain,
            }),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ForwardOperator::Identity { .. } => "identity",
            ForwardOperator::Mask { .. } => "mask",
            ForwardOperator::BoxMask { .. } => "box_mask",
            ForwardOperator::Downsample { .. } => "downsample",
            ForwardOperator::GaussianBlur(_) => "gaussian_blur",
            ForwardOperator::Radon(_) => "radon",
            ForwardOperator::NonlinearBlur { .. } => "nonlinear_blur",
        }
    }

    /// Pixel dimension.
    pub fn n(&self) -> usize {
        match self {
            ForwardOperator::Identity { n } | ForwardOperator::Mask { n, .. } => *n,
            ForwardOperator::BoxMask { height, width, .. } => height * width,
            ForwardOperator::Downsample { dims, .. } => dims.iter().product(),
            ForwardOperator::GaussianBlur(b) => b.len(),
            ForwardOperator::Radon(r) => r.pixels(),
            ForwardOperator::NonlinearBlur { blur, .. } => blur.len(),
        }
    }

    /// Measurement dimension.
    pub fn m(&self) -> usize {
        match self {
            ForwardOperator::Identity { n } => *n,
            ForwardOperator::Mask { keep, .. } | ForwardOperator::BoxMask { keep, .. } => {
                keep.len()
            }
            ForwardOperator::Downsample { dims, factor } => {
                dims.iter().map(|d| d / factor).product()
            }
            ForwardOperator::GaussianBlur(b) => b.len(),
            ForwardOperator::Radon(r) => r.rows(),
            ForwardOperator::NonlinearBlur { blur, .. } => blur.len(),
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, ForwardOperator::NonlinearBlur { .. })
    }

    /// Damping added to `A A^T` by [`Self::pseudoinverse_apply`].
    pub fn default_damping(&self) -> f64 {
        match self {
            ForwardOperator::Radon(_) => RADON_DAMPING,
            _ => 0.0,
        }
    }

    fn check(&self, v: &DVector<f64>, expected: usize, context: &'static str) -> Result<()> {
        if v.len() != expected {
            return Err(Error::dim(expected, v.len(), context));
        }
        Ok(())
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, self.n(), "operator input")?;
        let xs = x.as_slice();
        Ok(match self {
            ForwardOperator::Identity { .. } => x.clone(),
            ForwardOperator::Mask { keep, .. } | ForwardOperator::BoxMask { keep, .. } => {
                DVector::from_iterator(keep.len(), keep.iter().map(|&i| x[i]))
            }
            ForwardOperator::Downsample { dims, factor } => {
                DVector::from_vec(block_average(xs, dims, *factor))
            }
            ForwardOperator::GaussianBlur(b) => DVector::from_vec(b.apply(xs)),
            ForwardOperator::Radon(r) => DVector::from_vec(r.apply(xs)),
            ForwardOperator::NonlinearBlur { blur, gain } => DVector::from_iterator(
                self.m(),
                blur.apply(xs).into_iter().map(|v| (gain * v).tanh()),
            ),
        })
    }

    /// Transpose action; unsupported for the nonlinear kind.
    pub fn adjoint(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(u, self.m(), "operator adjoint input")?;
        let us = u.as_slice();
        Ok(match self {
            ForwardOperator::Identity { .. } => u.clone(),
            ForwardOperator::Mask { keep, .. } | ForwardOperator::BoxMask { keep, .. } => {
                let mut out = DVector::zeros(self.n());
                for (&i, &v) in keep.iter().zip(us) {
                    out[i] = v;
                }
                out
            }
            ForwardOperator::Downsample { dims, factor } => {
                DVector::from_vec(block_spread(us, dims, *factor))
            }
            ForwardOperator::GaussianBlur(b) => DVector::from_vec(b.adjoint(us)),
            ForwardOperator::Radon(r) => DVector::from_vec(r.adjoint(us)),
            ForwardOperator::NonlinearBlur { .. } => {
                return Err(Error::Unsupported {
                    op: "adjoint",
                    kind: self.kind_name().into(),
                })
            }
        })
    }

    /// `J_A(x)^T u`.
    pub fn jacobian_tvp(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, self.n(), "operator input")?;
        match self {
            ForwardOperator::NonlinearBlur { blur, gain } => {
                self.check(u, self.m(), "cotangent")?;
                let kx = blur.apply(x.as_slice());
                let gated: Vec<f64> = kx
                    .iter()
                    .zip(u.iter())
                    .map(|(&v, &ui)| gain * (1.0 - (gain * v).tanh().powi(2)) * ui)
                    .collect();
                Ok(DVector::from_vec(blur.adjoint(&gated)))
            }
            _ => self.adjoint(u),
        }
    }

    /// Dense matrix view of a linear operator (column `j` is `A e_j`).
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        if !self.is_linear() {
            return Err(Error::Unsupported {
                op: "matrix",
                kind: self.kind_name().into(),
            });
        }
        let (m, n) = (self.m(), self.n());
        let mut out = DMatrix::zeros(m, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e)?);
            e[j] = 0.0;
        }
        Ok(out)
    }

    /// `A^T (A A^T + damping I)^{-1} r` with the inner solve by conjugate gradients.
    pub fn pseudoinverse_apply_damped(
        &self,
        r: &DVector<f64>,
        damping: f64,
        cg_iters: usize,
        cg_tol: f64,
    ) -> Result<(DVector<f64>, CgOutcome)> {
        if !self.is_linear() {
            return Err(Error::Unsupported {
                op: "pseudoinverse",
                kind: self.kind_name().into(),
            });
        }
        self.check(r, self.m(), "pseudoinverse input")?;
        let normal = |u: &DVector<f64>| -> DVector<f64> {
            let at = self.adjoint(u).expect("linear adjoint");
            self.apply(&at).expect("linear apply") + u * damping
        };
        let out = cg_solve(normal, r, cg_iters, cg_tol)?;
        let x = self.adjoint(&out.x)?;
        Ok((x, out))
    }

    pub fn pseudoinverse_apply(
        &self,
        r: &DVector<f64>,
        cg_iters: usize,
        cg_tol: f64,
    ) -> Result<DVector<f64>> {
        self.pseudoinverse_apply_damped(r, self.default_damping(), cg_iters, cg_tol)
            .map(|(x, _)| x)
    }

    /// Filtered backprojection; only defined for the Radon kind.
    pub fn fbp_reconstruct(&self, sinogram: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            ForwardOperator::Radon(r) => {
                self.check(sinogram, self.m(), "sinogram")?;
                Ok(DVector::from_vec(r.fbp(sinogram.as_slice())))
            }
            _ => Err(Error::Unsupported {
                op: "fbp_reconstruct",
                kind: self.kind_name().into(),
            }),
        }
    }

    pub fn measure<R: Rng + ?Sized>(
        &self,
        x: &DVector<f64>,
        sigma_y: f64,
        rng: &mut R,
    ) -> Result<Measurement> {
        let clean = self.apply(x)?;
        add_noise(&clean, sigma_y, self.kind_name(), rng)
    }
}

/// `y = y_clean + sigma_y * eps`, `eps ~ N(0, I)`.
pub fn add_noise<R: Rng + ?Sized>(
    y_clean: &DVector<f64>,
    sigma_y: f64,
    operator_id: &str,
    rng: &mut R,
) -> Result<Measurement> {
    if !(sigma_y >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma_y must be >= 0, got {sigma_y}"
        )));
    }
    let y = if sigma_y == 0.0 {
        y_clean.clone()
    } else {
        y_clean + standard_normal(rng, y_clean.len()) * sigma_y
    };
    Ok(Measurement {
        y: y.iter().copied().collect(),
        sigma_y,
        operator_id: operator_id.to_string(),
    })
}

fn block_average(x: &[f64], dims: &[usize], f: usize) -> Vec<f64> {
    match dims {
        [n] => x[..*n]
            .chunks(f)
            .map(|c| c.iter().sum::<f64>() / f as f64)
            .collect(),
        [h, w] => {
            let (oh, ow) = (h / f, w / f);
            let norm = (f * f) as f64;
            let mut out = vec![0.0; oh * ow];
            for i in 0..*h {
                for j in 0..*w {
                    out[(i / f) * ow + j / f] += x[i * w + j] / norm;
                }
            }
            out
        }
        _ => unreachable!("validated at construction"),
    }
}

fn block_spread(u: &[f64], dims: &[usize], f: usize) -> Vec<f64> {
    match dims {
        [n] => (0..*n).map(|i| u[i / f] / f as f64).collect(),
        [h, w] => {
            let ow = w / f;
            let norm = (f * f) as f64;
            let mut out = vec![0.0; h * w];
            for i in 0..*h {
                for j in 0..*w {
                    out[i * w + j] = u[(i / f) * ow + j / f] / norm;
                }
            }
            out
        }
        _ => unreachable!("validated at construction"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Vec<ForwardOperator> {
        vec![
            ForwardOperator::Identity { n: 12 },
            ForwardOperator::random_mask(64, 0.7, 3).unwrap(),
            ForwardOperator::box_mask(8, 8, 2, 3, 3, 4).unwrap(),
            ForwardOperator::downsample(vec![8, 8], 2).unwrap(),
            ForwardOperator::downsample(vec![12], 3).unwrap(),
            ForwardOperator::GaussianBlur(CircularBlur::gaussian(8, 8, 5, 1.0).unwrap()),
            ForwardOperator::GaussianBlur(CircularBlur::gaussian(1, 16, 5, 1.2).unwrap()),
            ForwardOperator::radon(9, 7, 9).unwrap(),
        ]
    }

    #[test]
    fn adjoint_identity_for_linear_kinds() {
        let mut rng = stream(1, 0);
        for op in catalog() {
            for _ in 0..5 {
                let x = standard_normal(&mut rng, op.n());
                let u = standard_normal(&mut rng, op.m());
                let lhs = op.apply(&x).unwrap().dot(&u);
                let rhs = x.dot(&op.adjoint(&u).unwrap());
                assert!(
                    (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                    "{}: {lhs} vs {rhs}",
                    op.kind_name()
                );
            }
            assert!(op.m() <= op.n());
        }
    }

    #[test]
    fn mask_semantics() {
        let op = ForwardOperator::random_mask(100, 0.7, 11).unwrap();
        assert_eq!(op.m(), 70);
        let x = DVector::from_fn(100, |i, _| i as f64);
        let y = op.apply(&x).unwrap();
        let ForwardOperator::Mask { keep, .. } = &op else {
            unreachable!()
        };
        for (k, &i) in keep.iter().enumerate() {
            assert_eq!(y[k], i as f64);
        }
        let back = op.adjoint(&y).unwrap();
        for i in 0..100 {
            let kept = keep.binary_search(&i).is_ok();
            assert_eq!(back[i], if kept { i as f64 } else { 0.0 });
        }
    }

    #[test]
    fn downsample_block_average() {
        let op = ForwardOperator::downsample(vec![4], 2).unwrap();
        let y = op
            .apply(&DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]))
            .unwrap();
        assert_eq!(y.as_slice(), &[2.0, 6.0]);
    }

    #[test]
    fn nonlinear_blur_has_no_adjoint_but_a_jacobian() {
        let op = ForwardOperator::NonlinearBlur {
            blur: CircularBlur::gaussian(6, 6, 3, 0.8).unwrap(),
            gain: 3.0,
        };
        let u = DVector::zeros(36);
        assert!(matches!(op.adjoint(&u), Err(Error::Unsupported { .. })));
        let mut rng = stream(2, 0);
        let x = standard_normal(&mut rng, 36) * 0.3;
        let u = standard_normal(&mut rng, 36);
        let g = op.jacobian_tvp(&x, &u).unwrap();
        let h = 1e-6;
        for i in 0..36 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (op.apply(&xp).unwrap().dot(&u) - op.apply(&xm).unwrap().dot(&u)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
        assert_eq!(
            op.jacobian_tvp(&x, &DVector::zeros(36)).unwrap().amax(),
            0.0
        );
    }

    #[test]
    fn linear_jacobian_is_adjoint() {
        let mut rng = stream(3, 0);
        for op in catalog() {
            let x = standard_normal(&mut rng, op.n());
            let u = standard_normal(&mut rng, op.m());
            assert_eq!(op.jacobian_tvp(&x, &u).unwrap(), op.adjoint(&u).unwrap());
        }
    }

    #[test]
    fn pseudoinverse_of_identity_and_mask() {
        let mut rng = stream(4, 0);
        let id = ForwardOperator::Identity { n: 6 };
        let r = standard_normal(&mut rng, 6);
        assert!((id.pseudoinverse_apply(&r, 10, 1e-14).unwrap() - &r).amax() < 1e-14);

        let mask = ForwardOperator::mask(6, vec![0, 2, 5]).unwrap();
        let r = standard_normal(&mut rng, 3);
        let x = mask.pseudoinverse_apply(&r, 10, 1e-14).unwrap();
        assert!((x - mask.adjoint(&r).unwrap()).amax() < 1e-14);
    }

    #[test]
    fn pseudoinverse_projection_is_idempotent() {
        let mut rng = stream(5, 0);
        for op in catalog()
            .into_iter()
            .filter(|o| !matches!(o, ForwardOperator::Radon(_)))
        {
            let x = standard_normal(&mut rng, op.n());
            let project = |v: &DVector<f64>| {
                op.pseudoinverse_apply(&op.apply(v).unwrap(), 500, 1e-14)
                    .unwrap()
            };
            let px = project(&x);
            let ppx = project(&px);
            assert!((ppx - &px).norm() < 1e-8, "{}", op.kind_name());
        }
    }

    #[test]
    fn noise_is_seeded_and_zero_noise_is_exact() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = add_noise(&y, 0.0, "id", &mut stream(0, 0)).unwrap();
        assert_eq!(m.y, vec![1.0, 2.0, 3.0]);
        let a = add_noise(&y, 0.1, "id", &mut stream(9, 1)).unwrap();
        let b = add_noise(&y, 0.1, "id", &mut stream(9, 1)).unwrap();
        assert_eq!(a.y, b.y);
        assert!(add_noise(&y, -1.0, "id", &mut stream(9, 1)).is_err());
    }

    #[test]
    fn fbp_rejects_other_kinds_and_maps_zero_to_zero() {
        let op = ForwardOperator::Identity { n: 4 };
        assert!(op.fbp_reconstruct(&DVector::zeros(4)).is_err());
        let radon = ForwardOperator::radon(9, 5, 13).unwrap();
        let img = radon.fbp_reconstruct(&DVector::zeros(radon.m())).unwrap();
        assert_eq!(img.amax(), 0.0);
    }
}
