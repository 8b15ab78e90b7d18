//! Reference values: seeded Monte Carlo moments, 2-D quadrature of the
//! bivariate ReLU product moment, and the symmetric relative difference.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::{GaussianSpec, SAMPLE_BLOCK};
use crate::plnet::{PlNetwork, TruncatedNet};
use crate::quadrature::integrate;
use crate::relu_moments::BivariateParams;
use crate::specfun::norm_pdf;

/// Absolute tolerance of [`quad_bivar_relu`].
pub const QUAD_TOLERANCE: f64 = 1e-8;

// Integration windows extend this many standard deviations past the mean.
const WINDOW: f64 = 10.0;
const MAX_SEGMENTS: usize = 200;

/// `2|x − y|/(|x| + |y|)`, with `rel_diff(0, 0) = 0`.
pub fn rel_diff(x: f64, y: f64) -> f64 {
    if x == y {
        return 0.0;
    }
    2.0 * (x - y).abs() / (x.abs() + y.abs())
}

/// `∫₀^∞∫₀^∞ x₁ x₂ f(x₁, x₂) dx₁ dx₂` by nested adaptive Gauss–Kronrod
/// quadrature, accurate to [`QUAD_TOLERANCE`].
///
/// The outer variable is `x₂` over `[max(0, μ₂ − 10σ₂), μ₂ + 10σ₂]`; the inner
/// integral runs over the conditional law of `x₁` given `x₂`, truncated at ten
/// conditional standard deviations. At `|ρ| = 1` the pair is degenerate and
/// the inner integral collapses to a point evaluation.
pub fn quad_bivar_relu(p: &BivariateParams) -> Result<f64> {
    let hi = p.mu2 + WINDOW * p.sigma2;
    if hi <= 0.0 {
        return Ok(0.0);
    }
    let lo = (p.mu2 - WINDOW * p.sigma2).max(0.0);
    let slope = p.rho * p.sigma1 / p.sigma2;
    let cond_sd = p.sigma1 * (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let density = |x2: f64| x2 * norm_pdf((x2 - p.mu2) / p.sigma2) / p.sigma2;

    if cond_sd <= 1e-12 * p.sigma1 {
        // x₁ = μ₁ + slope·(x₂ − μ₂); split where it crosses zero.
        let f = |x2: f64| density(x2) * (p.mu1 + slope * (x2 - p.mu2)).max(0.0);
        let mut total = 0.0;
        let mut cuts = vec![lo, hi];
        if slope != 0.0 {
            let root = p.mu2 - p.mu1 / slope;
            if root > lo && root < hi {
                cuts.insert(1, root);
            }
        }
        for w in cuts.windows(2) {
            total += integrate(f, w[0], w[1], 0.5 * QUAD_TOLERANCE, 0.0, MAX_SEGMENTS)?.value;
        }
        return Ok(total);
    }

    let mut inner_error = None;
    let outer = integrate(
        |x2| {
            let m = p.mu1 + slope * (x2 - p.mu2);
            let top = m + WINDOW * cond_sd;
            if top <= 0.0 {
                return 0.0;
            }
            let bottom = (m - WINDOW * cond_sd).max(0.0);
            let inner = integrate(
                |x1| x1 * norm_pdf((x1 - m) / cond_sd) / cond_sd,
                bottom,
                top,
                1e-12,
                1e-12,
                MAX_SEGMENTS,
            );
            match inner {
                Ok(q) => density(x2) * q.value,
                Err(e) => {
                    inner_error.get_or_insert(e);
                    0.0
                }
            }
        },
        lo,
        hi,
        0.1 * QUAD_TOLERANCE,
        0.0,
        MAX_SEGMENTS,
    )?;
    if let Some(e) = inner_error {
        return Err(e);
    }
    Ok(outer.value)
}

/// Anything that maps a batch of inputs (one per column) to outputs.
pub trait BatchForward: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// `inputs` is `n × m`; returns `d × m`.
    fn forward_columns(&self, inputs: &DMatrix<f64>) -> DMatrix<f64>;
}

fn affine_columns(w: &DMatrix<f64>, b: &DVector<f64>, x: &DMatrix<f64>, relu: bool) -> DMatrix<f64> {
    let mut h = w * x;
    for mut col in h.column_iter_mut() {
        col += b;
        if relu {
            col.apply(|z| *z = z.max(0.0));
        }
    }
    h
}

impl BatchForward for PlNetwork {
    fn input_dim(&self) -> usize {
        PlNetwork::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        PlNetwork::output_dim(self)
    }

    fn forward_columns(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = inputs.clone();
        for (layer, &r) in self.layers().iter().zip(self.relu_after()) {
            h = affine_columns(layer.weights(), layer.bias(), &h, r);
        }
        h
    }
}

impl BatchForward for TruncatedNet {
    fn input_dim(&self) -> usize {
        TruncatedNet::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        TruncatedNet::output_dim(self)
    }

    fn forward_columns(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let h = affine_columns(self.a().weights(), self.a().bias(), inputs, true);
        affine_columns(self.b().weights(), self.b().bias(), &h, false)
    }
}

/// Sample moments of the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: DVector<f64>,
    /// Unbiased (divisor `samples − 1`).
    pub variance: DVector<f64>,
    /// `√(variance/samples)`.
    pub mean_se: DVector<f64>,
    /// Standard error of `variance`, from the sample fourth central moment.
    pub variance_se: DVector<f64>,
    pub samples: usize,
    pub seed: u64,
}

// Power sums of (y − shift) for one block.
struct PowerSums {
    count: f64,
    s: [DVector<f64>; 4],
}

/// Mean and variance of `net(x)` over `samples` draws of `x ~ g`.
///
/// Draws are the rows of [`crate::gauss::sample`] for `seed`; blocks are
/// evaluated in parallel and reduced in block order, so the estimate is
/// bit-identical for a given `(seed, samples)`.
pub fn mc_moments<N: BatchForward + ?Sized>(net: &N, g: &GaussianSpec, samples: usize, seed: u64) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::Precondition(format!("need at least 2 samples, got {samples}")));
    }
    if g.dim() != net.input_dim() {
        return Err(Error::dims("mc_moments", net.input_dim(), g.dim()));
    }
    let d = net.output_dim();
    let sampler = g.sampler()?;
    // Accumulating about the output at the mean keeps the power sums well scaled.
    let shift = net.forward_columns(&DMatrix::from_column_slice(g.dim(), 1, g.mean().as_slice()));
    let shift = shift.column(0).into_owned();
    let blocks = samples.div_ceil(SAMPLE_BLOCK);
    let partial: Vec<PowerSums> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let rows = SAMPLE_BLOCK.min(samples - b * SAMPLE_BLOCK);
            let x = sampler.block(seed, b, rows).transpose();
            let y = net.forward_columns(&x);
            let mut s = [DVector::zeros(d), DVector::zeros(d), DVector::zeros(d), DVector::zeros(d)];
            for col in y.column_iter() {
                for i in 0..d {
                    let z = col[i] - shift[i];
                    let z2 = z * z;
                    s[0][i] += z;
                    s[1][i] += z2;
                    s[2][i] += z2 * z;
                    s[3][i] += z2 * z2;
                }
            }
            PowerSums {
                count: rows as f64,
                s,
            }
        })
        .collect();

    let mut total = PowerSums {
        count: 0.0,
        s: [DVector::zeros(d), DVector::zeros(d), DVector::zeros(d), DVector::zeros(d)],
    };
    for part in &partial {
        total.count += part.count;
        for k in 0..4 {
            total.s[k] += &part.s[k];
        }
    }
    let n = total.count;
    let mut mean = DVector::zeros(d);
    let mut variance = DVector::zeros(d);
    let mut variance_se = DVector::zeros(d);
    for i in 0..d {
        let m = total.s[0][i] / n;
        let m2 = (total.s[1][i] / n - m * m).max(0.0);
        let m4 = total.s[3][i] / n - 4.0 * m * total.s[2][i] / n + 6.0 * m * m * total.s[1][i] / n
            - 3.0 * m.powi(4);
        mean[i] = shift[i] + m;
        variance[i] = m2 * n / (n - 1.0);
        variance_se[i] = ((m4 - m2 * m2).max(0.0) / n).sqrt();
    }
    let mean_se = variance.map(|v| (v / n).sqrt());
    Ok(McEstimate {
        mean,
        variance,
        mean_se,
        variance_se,
        samples,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relu_moments::relu_mean;
    use crate::plnet::AffineMap;
    use std::f64::consts::PI;

    #[test]
    fn rel_diff_values() {
        assert_eq!(rel_diff(3.0, 3.0), 0.0);
        assert_eq!(rel_diff(0.0, 0.0), 0.0);
        assert_eq!(rel_diff(1.0, 0.0), 2.0);
        assert!((rel_diff(0.11, 0.1) - 0.02 / 0.21).abs() < 1e-15);
    }

    #[test]
    fn quadrature_boundary_value() {
        let p = BivariateParams::new(0.0, 0.0, 1.4, 0.7, 0.0).unwrap();
        assert!((quad_bivar_relu(&p).unwrap() - 1.4 * 0.7 / (2.0 * PI)).abs() < 1e-8);
    }

    #[test]
    fn quadrature_separates_at_zero_correlation() {
        for &(m1, m2, s1, s2) in &[(0.5, -0.7, 1.0, 0.3), (-1.8, 1.9, 0.2, 2.0), (2.0, 2.0, 0.2, 0.2)] {
            let p = BivariateParams::new(m1, m2, s1, s2, 0.0).unwrap();
            let product = relu_mean(m1, s1) * relu_mean(m2, s2);
            assert!((quad_bivar_relu(&p).unwrap() - product).abs() < 1e-8);
        }
    }

    #[test]
    fn quadrature_negative_window_is_zero() {
        let p = BivariateParams::new(1.0, -30.0, 1.0, 1.0, 0.5).unwrap();
        assert_eq!(quad_bivar_relu(&p).unwrap(), 0.0);
    }

    #[test]
    fn mc_zero_variance_is_exact() {
        let net = PlNetwork::new(
            vec![
                AffineMap::new(DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]), DVector::from_row_slice(&[0.1, -3.0])).unwrap(),
                AffineMap::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::zeros(1)).unwrap(),
            ],
            vec![true, false],
        )
        .unwrap();
        let mu = DVector::from_row_slice(&[0.4, 0.2]);
        let g = GaussianSpec::isotropic(mu.clone(), 0.0).unwrap();
        let est = mc_moments(&net, &g, 100, 5).unwrap();
        assert_eq!(est.mean, net.forward(&mu).unwrap());
        assert_eq!(est.variance[0], 0.0);
    }

    #[test]
    fn mc_identity_mean_within_clt() {
        let net = PlNetwork::new(vec![AffineMap::identity(1)], vec![false]).unwrap();
        let g = GaussianSpec::isotropic(DVector::zeros(1), 1.0).unwrap();
        let est = mc_moments(&net, &g, 1_000_000, 17).unwrap();
        assert!(est.mean[0].abs() < 4e-3);
        assert!((est.variance[0] - 1.0).abs() < 4.0 * est.variance_se[0]);
        // Var of the sample variance of a standard normal is 2/n.
        assert!((est.variance_se[0] - (2e-6f64).sqrt()).abs() < 1e-4);
    }

    #[test]
    fn mc_is_deterministic() {
        let net = PlNetwork::new(vec![AffineMap::identity(3)], vec![false]).unwrap();
        let g = GaussianSpec::isotropic(DVector::from_row_slice(&[1.0, 2.0, 3.0]), 0.5).unwrap();
        let a = mc_moments(&net, &g, 10_000, 9).unwrap();
        let b = mc_moments(&net, &g, 10_000, 9).unwrap();
        assert_eq!(a, b);
        assert!(mc_moments(&net, &g, 1, 9).is_err());
    }
}
