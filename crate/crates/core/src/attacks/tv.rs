//! Smoothed isotropic total variation on a row-major `h × w` image.
//!
//! Forward differences with a replicated border, so the last column has no
//! horizontal difference and the last row no vertical one.

use nalgebra::DVector;

use crate::error::{Error, Result};

fn check(mu: &DVector<f64>, w: usize, h: usize, epsilon: f64) -> Result<()> {
    if w * h != mu.len() {
        return Err(Error::dims("tv image shape", w * h, mu.len()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::domain("tv", format!("epsilon {epsilon} must be >= 0")));
    }
    Ok(())
}

#[inline]
fn diffs(mu: &DVector<f64>, w: usize, h: usize, r: usize, c: usize) -> (f64, f64) {
    let here = mu[r * w + c];
    let gx = if c + 1 < w { mu[r * w + c + 1] - here } else { 0.0 };
    let gy = if r + 1 < h { mu[(r + 1) * w + c] - here } else { 0.0 };
    (gx, gy)
}

/// `Σ √(gx² + gy² + ε²) − w·h·ε`; zero for a constant image.
pub fn tv(mu: &DVector<f64>, w: usize, h: usize, epsilon: f64) -> Result<f64> {
    check(mu, w, h, epsilon)?;
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let (gx, gy) = diffs(mu, w, h, r, c);
            total += (gx * gx + gy * gy + epsilon * epsilon).sqrt() - epsilon;
        }
    }
    Ok(total)
}

/// Gradient of [`tv`]. Where `ε = 0` and both differences vanish the
/// zero subgradient is used.
pub fn tv_gradient(mu: &DVector<f64>, w: usize, h: usize, epsilon: f64) -> Result<DVector<f64>> {
    check(mu, w, h, epsilon)?;
    let mut grad = DVector::zeros(mu.len());
    for r in 0..h {
        for c in 0..w {
            let (gx, gy) = diffs(mu, w, h, r, c);
            let q = (gx * gx + gy * gy + epsilon * epsilon).sqrt();
            if q == 0.0 {
                continue;
            }
            let i = r * w + c;
            if c + 1 < w {
                grad[i + 1] += gx / q;
                grad[i] -= gx / q;
            }
            if r + 1 < h {
                grad[i + w] += gy / q;
                grad[i] -= gy / q;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    #[test]
    fn constant_image_is_flat() {
        let mu = DVector::from_element(12, 3.5);
        assert_eq!(tv(&mu, 4, 3, 1e-3).unwrap(), 0.0);
        assert_eq!(tv_gradient(&mu, 4, 3, 1e-3).unwrap(), DVector::zeros(12));
    }

    #[test]
    fn interior_spike() {
        let mut mu = DVector::zeros(25);
        mu[2 * 5 + 2] = 1.0;
        assert!((tv(&mu, 5, 5, 0.0).unwrap() - (2.0 + SQRT_2)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        assert!(tv(&DVector::zeros(10), 3, 3, 0.0).is_err());
        assert!(tv(&DVector::zeros(9), 3, 3, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (w, h) = (4, 3);
        let mu = DVector::from_fn(w * h, |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        let g = tv_gradient(&mu, w, h, 1e-2).unwrap();
        for i in 0..mu.len() {
            let mut up = mu.clone();
            let mut down = mu.clone();
            up[i] += 1e-6;
            down[i] -= 1e-6;
            let fd = (tv(&up, w, h, 1e-2).unwrap() - tv(&down, w, h, 1e-2).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "pixel {i}");
        }
    }
}
