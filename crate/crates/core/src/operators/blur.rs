use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Circular 2-D convolution with a normalized Gaussian kernel.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CircularBlur {
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub sigma: f64,
    kernel: Vec<f64>,
}

impl CircularBlur {
    pub fn gaussian(height: usize, width: usize, size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "blur kernel size must be odd, got {size}"
            )));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument("blur sigma must be > 0".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("blur grid must be non-empty".into()));
        }
        let c = (size / 2) as f64;
        // 1-D signals use a 1-D kernel
        let rows = if height == 1 { 1 } else { size };
        let mut kernel = Vec::with_capacity(rows * size);
        for a in 0..rows {
            for b in 0..size {
                let dy = if rows == 1 { 0.0 } else { a as f64 - c };
                let dx = b as f64 - c;
                kernel.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        Ok(Self {
            height,
            width,
            size,
            sigma,
            kernel,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self) -> usize {
        self.kernel.len() / self.size
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.correlate(x, false)
    }

    pub fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        self.correlate(u, true)
    }

    fn correlate(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let (h, w) = (self.height as isize, self.width as isize);
        let rows = self.rows() as isize;
        let cols = self.size as isize;
        let (cy, cx) = (rows / 2, cols / 2);
        let mut out = vec![0.0; self.len()];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for a in 0..rows {
                    for b in 0..cols {
                        let k = self.kernel[(a * cols + b) as usize];
                        let (si, sj) = if transpose {
                            (i + a - cy, j + b - cx)
                        } else {
                            (i - a + cy, j - b + cx)
                        };
                        let si = si.rem_euclid(h);
                        let sj = sj.rem_euclid(w);
                        acc += k * x[(si * w + sj) as usize];
                    }
                }
                out[(i * w + j) as usize] = acc;
            }
        }
        out
    }
}
