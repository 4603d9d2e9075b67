//! Decoder `D: R^k -> R^n` and its approximate inverse `E`.
//!
//! Two families: an affine map `W z + b`, and a one-hidden-layer network
//! `W2 tanh(W1 z + b1) + b2` with fixed seeded weights. Both expose an
//! analytic vector-Jacobian product, so gradients of measurement losses in
//! latent space need no autodiff.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream};

const RANK_TOL: f64 = 1e-8;
const ENCODE_TOL: f64 = 1e-8;
const ENCODE_MAX_ITERS: usize = 100;

#[derive(Clone, Debug)]
pub struct LinearDecoder {
    w: DMatrix<f64>,
    b: DVector<f64>,
    pinv: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpDecoder {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    /// Pseudo-inverse of the Jacobian at `z = 0`, used to seed Gauss-Newton.
    init_pinv: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub enum LatentMap {
    Linear(LinearDecoder),
    Mlp(MlpDecoder),
}

/// Outcome of [`LatentMap::encode`]. Non-convergence is reported, not raised.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub z: DVector<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentMapSpec {
    Identity {
        dim: usize,
    },
    Linear {
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
    /// Random affine map with orthonormal columns scaled by `scale`.
    RandomLinear {
        d_latent: usize,
        d_pixel: usize,
        seed: u64,
        scale: f64,
    },
    Mlp {
        d_latent: usize,
        d_pixel: usize,
        seed: u64,
    },
    /// Disk, ellipse and bump images on a `grid x grid` image.
    PhantomBasis {
        grid: usize,
    },
}

fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .pseudo_inverse(1e-12)
        .expect("pseudo-inverse with nonnegative epsilon")
}

impl LatentMap {
    pub fn linear(w: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if w.nrows() != b.len() {
            return Err(Error::dim(w.nrows(), b.len(), "decoder offset"));
        }
        if w.ncols() > w.nrows() {
            return Err(Error::InvalidArgument(
                "latent dimension must not exceed pixel dimension".into(),
            ));
        }
        if smallest_singular_value(&w) <= RANK_TOL {
            return Err(Error::InvalidArgument(
                "linear decoder must have full column rank".into(),
            ));
        }
        let pinv = pseudo_inverse(&w);
        Ok(LatentMap::Linear(LinearDecoder { w, b, pinv }))
    }

    pub fn identity(dim: usize) -> Self {
        Self::linear(DMatrix::identity(dim, dim), DVector::zeros(dim))
            .expect("identity has full rank")
    }

    /// Affine map whose columns are orthonormal, times `scale`.
    pub fn random_linear(d_latent: usize, d_pixel: usize, seed: u64, scale: f64) -> Result<Self> {
        if d_latent == 0 || d_latent > d_pixel {
            return Err(Error::InvalidArgument(format!(
                "need 0 < d_latent <= d_pixel, got {d_latent} > {d_pixel}"
            )));
        }
        let mut rng = stream(seed, 0);
        let g = DMatrix::from_fn(d_pixel, d_latent, |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let q = g.qr().q() * scale;
        Self::linear(q, DVector::zeros(d_pixel))
    }

    pub fn mlp(
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        b2: DVector<f64>,
    ) -> Result<Self> {
        let (hidden, d_latent) = w1.shape();
        let d_pixel = w2.nrows();
        if b1.len() != hidden || w2.ncols() != hidden || b2.len() != d_pixel {
            return Err(Error::InvalidArgument("inconsistent network shapes".into()));
        }
        if d_latent > d_pixel {
            return Err(Error::InvalidArgument(
                "latent dimension must not exceed pixel dimension".into(),
            ));
        }
        if smallest_singular_value(&w1) <= RANK_TOL {
            return Err(Error::InvalidArgument(
                "W1 must have full column rank".into(),
            ));
        }
        let slope = b1.map(|v| 1.0 - v.tanh().powi(2));
        let j0 = &w2 * DMatrix::from_diagonal(&slope) * &w1;
        if smallest_singular_value(&j0) <= RANK_TOL {
            return Err(Error::InvalidArgument(
                "network Jacobian at the origin must have full column rank".into(),
            ));
        }
        let init_pinv = pseudo_inverse(&j0);
        Ok(LatentMap::Mlp(MlpDecoder {
            w1,
            b1,
            w2,
            b2,
            init_pinv,
        }))
    }

    /// Fixed network with hidden width `2 * d_pixel` and weights scaled by `1/sqrt(fan_in)`.
    pub fn seeded_mlp(d_latent: usize, d_pixel: usize, seed: u64) -> Result<Self> {
        if d_latent == 0 || d_latent > d_pixel {
            return Err(Error::InvalidArgument(format!(
                "need 0 < d_latent <= d_pixel, got {d_latent} > {d_pixel}"
            )));
        }
        let hidden = 2 * d_pixel;
        let mut rng = stream(seed, 0);
        let s1 = 1.0 / (d_latent as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1 = DMatrix::from_iterator(
            hidden,
            d_latent,
            standard_normal(&mut rng, hidden * d_latent)
                .iter()
                .map(|v| v * s1),
        );
        let b1 = standard_normal(&mut rng, hidden) * 0.1;
        let w2 = DMatrix::from_iterator(
            d_pixel,
            hidden,
            standard_normal(&mut rng, d_pixel * hidden)
                .iter()
                .map(|v| v * s2),
        );
        let b2 = DVector::zeros(d_pixel);
        Self::mlp(w1, b1, w2, b2)
    }

    pub fn from_spec(spec: &LatentMapSpec) -> Result<Self> {
        match spec {
            LatentMapSpec::Identity { dim } => Ok(Self::identity(*dim)),
            LatentMapSpec::Linear { w, b } => {
                let rows = w.len();
                let cols = w.first().map(Vec::len).unwrap_or(0);
                if w.iter().any(|r| r.len() != cols) {
                    return Err(Error::InvalidArgument("ragged decoder matrix".into()));
                }
                Self::linear(
                    DMatrix::from_fn(rows, cols, |i, j| w[i][j]),
                    DVector::from_column_slice(b),
                )
            }
            LatentMapSpec::RandomLinear {
                d_latent,
                d_pixel,
                seed,
                scale,
            } => Self::random_linear(*d_latent, *d_pixel, *seed, *scale),
            LatentMapSpec::Mlp {
                d_latent,
                d_pixel,
                seed,
            } => Self::seeded_mlp(*d_latent, *d_pixel, *seed),
            LatentMapSpec::PhantomBasis { grid } => {
                if *grid < 4 {
                    return Err(Error::InvalidArgument(format!(
                        "phantom grid too small: {grid}"
                    )));
                }
                Self::linear(
                    crate::phantom::basis_matrix(*grid),
                    DVector::zeros(grid * grid),
                )
            }
        }
    }

    pub fn d_latent(&self) -> usize {
        match self {
            LatentMap::Linear(m) => m.w.ncols(),
            LatentMap::Mlp(m) => m.w1.ncols(),
        }
    }

    pub fn d_pixel(&self) -> usize {
        match self {
            LatentMap::Linear(m) => m.w.nrows(),
            LatentMap::Mlp(m) => m.w2.nrows(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, LatentMap::Linear(_))
    }

    fn check_latent(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.d_latent() {
            return Err(Error::dim(self.d_latent(), z.len(), "latent vector"));
        }
        Ok(())
    }

    fn check_pixel(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.d_pixel() {
            return Err(Error::dim(self.d_pixel(), x.len(), "pixel vector"));
        }
        Ok(())
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_latent(z)?;
        Ok(match self {
            LatentMap::Linear(m) => &m.w * z + &m.b,
            LatentMap::Mlp(m) => {
                let h = (&m.w1 * z + &m.b1).map(f64::tanh);
                &m.w2 * h + &m.b2
            }
        })
    }

    /// `J(z)^T cotangent`.
    pub fn decode_vjp(&self, z: &DVector<f64>, cotangent: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_latent(z)?;
        self.check_pixel(cotangent)?;
        Ok(match self {
            LatentMap::Linear(m) => m.w.tr_mul(cotangent),
            LatentMap::Mlp(m) => {
                let pre = &m.w1 * z + &m.b1;
                let back = m.w2.tr_mul(cotangent);
                let gated = back.zip_map(&pre, |g, p| g * (1.0 - p.tanh().powi(2)));
                m.w1.tr_mul(&gated)
            }
        })
    }

    pub fn jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_latent(z)?;
        Ok(match self {
            LatentMap::Linear(m) => m.w.clone(),
            LatentMap::Mlp(m) => {
                let pre = &m.w1 * z + &m.b1;
                let slope = pre.map(|p| 1.0 - p.tanh().powi(2));
                &m.w2 * DMatrix::from_diagonal(&slope) * &m.w1
            }
        })
    }

    /// Least-squares preimage: exact pseudo-inverse for the affine map,
    /// damped Gauss-Newton for the network.
    pub fn encode(&self, x: &DVector<f64>) -> Result<Encoded> {
        self.check_pixel(x)?;
        match self {
            LatentMap::Linear(m) => {
                let z = &m.pinv * (x - &m.b);
                let grad_norm = m.w.tr_mul(&(&m.w * &z + &m.b - x)).norm();
                Ok(Encoded {
                    z,
                    iterations: 0,
                    grad_norm,
                    converged: true,
                })
            }
            LatentMap::Mlp(m) => {
                let origin = DVector::zeros(self.d_latent());
                let z0 = &m.init_pinv * (x - self.decode(&origin)?);
                self.gauss_newton(x, z0)
            }
        }
    }

    fn gauss_newton(&self, x: &DVector<f64>, mut z: DVector<f64>) -> Result<Encoded> {
        let d = self.d_latent();
        let mut residual = self.decode(&z)? - x;
        let mut cost = 0.5 * residual.norm_squared();
        let mut damping = 1e-3;
        let mut grad_norm = f64::INFINITY;
        for iter in 0..ENCODE_MAX_ITERS {
            let jac = self.jacobian(&z)?;
            let grad = jac.tr_mul(&residual);
            grad_norm = grad.norm();
            if grad_norm < ENCODE_TOL {
                return Ok(Encoded {
                    z,
                    iterations: iter,
                    grad_norm,
                    converged: true,
                });
            }
            let jtj = jac.tr_mul(&jac);
            let mut accepted = false;
            for _ in 0..30 {
                let system = &jtj + DMatrix::identity(d, d) * damping;
                let Some(chol) = system.cholesky() else {
                    damping *= 10.0;
                    continue;
                };
                let step = chol.solve(&(-&grad));
                let trial = &z + &step;
                let trial_res = self.decode(&trial)? - x;
                let trial_cost = 0.5 * trial_res.norm_squared();
                if trial_cost.is_finite() && trial_cost <= cost {
                    z = trial;
                    residual = trial_res;
                    cost = trial_cost;
                    damping = (damping / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                damping *= 4.0;
            }
            if !accepted {
                break;
            }
        }
        let grad = self.decode_vjp(&z, &residual)?;
        grad_norm = grad_norm.min(grad.norm());
        if grad_norm >= ENCODE_TOL {
            log::warn!("encoder stopped with gradient norm {grad_norm:e}");
        }
        Ok(Encoded {
            converged: grad_norm < ENCODE_TOL,
            z,
            iterations: ENCODE_MAX_ITERS,
            grad_norm,
        })
    }

    /// Named weight tensors with their row-major shapes, for the raw-tensor format.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        fn mat(m: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
            let data = (0..m.nrows())
                .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
                .collect();
            (vec![m.nrows(), m.ncols()], data)
        }
        fn vec(v: &DVector<f64>) -> (Vec<usize>, Vec<f64>) {
            (vec![v.len()], v.iter().copied().collect())
        }
        let pack = |name, (shape, data): (Vec<usize>, Vec<f64>)| (name, shape, data);
        match self {
            LatentMap::Linear(m) => vec![pack("w", mat(&m.w)), pack("b", vec(&m.b))],
            LatentMap::Mlp(m) => vec![
                pack("w1", mat(&m.w1)),
                pack("b1", vec(&m.b1)),
                pack("w2", mat(&m.w2)),
                pack("b2", vec(&m.b2)),
            ],
        }
    }
}
