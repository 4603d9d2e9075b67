//! Parallel-beam Radon transform on a square pixel grid.
//!
//! The system matrix is assembled once by exact ray tracing: each ray is cut
//! at every pixel boundary it crosses, and the chord length inside each pixel
//! becomes the matrix weight. Pixels have unit size and the grid is centered
//! on the origin; detectors have unit spacing.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Radon {
    pub grid: usize,
    pub n_angles: usize,
    pub n_detectors: usize,
    pub angles: Vec<f64>,
    /// CSR layout, one row per (angle, detector) pair, angle-major.
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Radon {
    /// Angles `i * pi / n_angles`, `i = 0..n_angles`.
    pub fn new(grid: usize, n_angles: usize, n_detectors: usize) -> Result<Self> {
        if grid < 8 {
            return Err(Error::InvalidArgument(format!(
                "radon grid side must be >= 8, got {grid}"
            )));
        }
        if n_angles == 0 || n_detectors == 0 {
            return Err(Error::InvalidArgument(
                "radon needs at least one angle and one detector".into(),
            ));
        }
        if n_detectors < grid {
            log::warn!("{n_detectors} detectors undersample a {grid}-pixel grid");
        }
        let angles: Vec<f64> = (0..n_angles)
            .map(|i| i as f64 * PI / n_angles as f64)
            .collect();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for &theta in &angles {
            for k in 0..n_detectors {
                let s = detector_offset(k, n_detectors);
                for (idx, len) in trace_ray(grid, theta, s) {
                    cols.push(idx);
                    vals.push(len);
                }
                row_ptr.push(cols.len());
            }
        }
        Ok(Self {
            grid,
            n_angles,
            n_detectors,
            angles,
            row_ptr,
            cols,
            vals,
        })
    }

    /// Detector count that covers the grid diagonal at unit spacing (always odd).
    pub fn covering_detectors(grid: usize) -> usize {
        let d = (grid as f64 * 2f64.sqrt()).ceil() as usize;
        if d.is_multiple_of(2) {
            d + 1
        } else {
            d
        }
    }

    pub fn rows(&self) -> usize {
        self.n_angles * self.n_detectors
    }

    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .map(|r| {
                let span = self.row_ptr[r]..self.row_ptr[r + 1];
                self.cols[span.clone()]
                    .iter()
                    .zip(&self.vals[span])
                    .map(|(&c, &v)| v * x[c])
                    .sum()
            })
            .collect()
    }

    /// Unfiltered backprojection.
    pub fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.pixels()];
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            for idx in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[idx]] += self.vals[idx] * ur;
            }
        }
        out
    }

    /// Ram-Lak filtered backprojection scaled by `pi / n_angles`.
    pub fn fbp(&self, sinogram: &[f64]) -> Vec<f64> {
        let d = self.n_detectors;
        let len = (2 * d).next_power_of_two();
        // spatial Ram-Lak taps at unit detector spacing, wrapped for circular FFT
        let mut taps = vec![Complex::new(0.0, 0.0); len];
        taps[0].re = 0.25;
        for n in 1..len / 2 {
            if n % 2 == 1 {
                let v = -1.0 / (PI * PI * (n * n) as f64);
                taps[n].re = v;
                taps[len - n].re = v;
            }
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        fwd.process(&mut taps);
        let response: Vec<f64> = taps.iter().map(|c| c.re).collect();

        let mut filtered = vec![0.0; sinogram.len()];
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        for a in 0..self.n_angles {
            let row = &sinogram[a * d..(a + 1) * d];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, &v) in buf.iter_mut().zip(row) {
                b.re = v;
            }
            fwd.process(&mut buf);
            for (b, &h) in buf.iter_mut().zip(&response) {
                *b *= h;
            }
            inv.process(&mut buf);
            for (k, out) in filtered[a * d..(a + 1) * d].iter_mut().enumerate() {
                *out = buf[k].re / len as f64;
            }
        }
        let scale = PI / self.n_angles as f64;
        self.adjoint(&filtered)
            .into_iter()
            .map(|v| v * scale)
            .collect()
    }
}

fn detector_offset(k: usize, n: usize) -> f64 {
    k as f64 - (n as f64 - 1.0) / 2.0
}

/// Pixel indices and chord lengths of the line `x cos(theta) + y sin(theta) = s`.
fn trace_ray(grid: usize, theta: f64, s: f64) -> Vec<(usize, f64)> {
    let half = grid as f64 / 2.0;
    let (sin, cos) = theta.sin_cos();
    let origin = (s * cos, s * sin);
    let dir = (-sin, cos);
    const EPS: f64 = 1e-12;

    // clip the parametric line to the grid box
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (p, d) in [(origin.0, dir.0), (origin.1, dir.1)] {
        if d.abs() < EPS {
            if p <= -half || p >= half {
                return Vec::new();
            }
        } else {
            let a = (-half - p) / d;
            let b = (half - p) / d;
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    if hi - lo <= EPS {
        return Vec::new();
    }

    let mut cuts = vec![lo, hi];
    for (p, d) in [(origin.0, dir.0), (origin.1, dir.1)] {
        if d.abs() < EPS {
            continue;
        }
        for k in 0..=grid {
            let plane = k as f64 - half;
            let l = (plane - p) / d;
            if l > lo && l < hi {
                cuts.push(l);
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("finite cut"));

    let mut out: Vec<(usize, f64)> = Vec::new();
    for w in cuts.windows(2) {
        let len = w[1] - w[0];
        if len <= EPS {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let x = origin.0 + mid * dir.0;
        let y = origin.1 + mid * dir.1;
        let col = ((x + half).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let row = ((half - y).floor() as isize).clamp(0, grid as isize - 1) as usize;
        let idx = row * grid + col;
        match out.last_mut() {
            Some((last, acc)) if *last == idx => *acc += len,
            _ => out.push((idx, len)),
        }
    }
    out
}
