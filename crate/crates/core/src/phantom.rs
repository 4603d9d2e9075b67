//! Disk-and-ellipse phantoms expressed as a linear image basis.
//!
//! Coordinates span `[-1, 1]` over the grid, with `u` to the right and `v`
//! upward. Each basis image is one anatomical piece; a phantom is a
//! coefficient vector, so phantoms sit exactly in the range of a linear decoder.

use nalgebra::DMatrix;

struct Ellipse {
    cu: f64,
    cv: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cu, v - self.cv);
        let p = c * du + s * dv;
        let q = -s * du + c * dv;
        (p / self.a).powi(2) + (q / self.b).powi(2) <= 1.0
    }
}

const BODY: Ellipse = Ellipse {
    cu: 0.0,
    cv: 0.0,
    a: 0.85,
    b: 0.85,
    angle: 0.0,
};

const ORGANS: [Ellipse; 3] = [
    Ellipse {
        cu: -0.3,
        cv: 0.15,
        a: 0.28,
        b: 0.18,
        angle: 0.4,
    },
    Ellipse {
        cu: 0.32,
        cv: -0.1,
        a: 0.18,
        b: 0.3,
        angle: -0.3,
    },
    Ellipse {
        cu: 0.0,
        cv: -0.5,
        a: 0.12,
        b: 0.12,
        angle: 0.0,
    },
];

const BUMPS: [(f64, f64); 4] = [(-0.4, -0.35), (0.4, 0.4), (-0.35, 0.5), (0.45, -0.45)];
const BUMP_WIDTH: f64 = 0.18;

/// Number of basis images.
pub const BASIS_SIZE: usize = 1 + ORGANS.len() + BUMPS.len();

fn pixel_center(k: usize, grid: usize) -> f64 {
    -1.0 + (2.0 * k as f64 + 1.0) / grid as f64
}

/// `grid^2 x BASIS_SIZE` matrix; column `j` is basis image `j` in row-major order.
pub fn basis_matrix(grid: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(grid * grid, BASIS_SIZE);
    for row in 0..grid {
        let v = -pixel_center(row, grid);
        for col in 0..grid {
            let u = pixel_center(col, grid);
            let idx = row * grid + col;
            let inside = BODY.contains(u, v);
            w[(idx, 0)] = f64::from(u8::from(inside));
            for (j, e) in ORGANS.iter().enumerate() {
                w[(idx, 1 + j)] = f64::from(u8::from(e.contains(u, v)));
            }
            if inside {
                for (j, (bu, bv)) in BUMPS.iter().enumerate() {
                    let r2 = (u - bu).powi(2) + (v - bv).powi(2);
                    w[(idx, 1 + ORGANS.len() + j)] = (-r2 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp();
                }
            }
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_full_rank_and_supported_in_the_body() {
        let w = basis_matrix(33);
        let s = w.clone().singular_values();
        assert!(s.min() > 1e-3);
        // corner pixel is outside the body disk
        assert!(w.row(0).iter().all(|&v| v == 0.0));
        // center pixel is inside
        let c = 16 * 33 + 16;
        assert_eq!(w[(c, 0)], 1.0);
    }
}
