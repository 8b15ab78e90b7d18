//! Closed-form first and second moments of ReLU applied to Gaussian variables.
//!
//! Univariate: `E[max(x,0)]` and `E[max(x,0)²]` for `x ~ N(μ, σ²)`.
//! Bivariate: `E[max(x₁,0) max(x₂,0)]` for a correlated pair, both in the
//! zero-mean arcsine form and in the general form `Ω + K·(series)` where the
//! series is [`i_ab`] in one of two branches depending on `|ρ|`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use crate::error::{Error, Result};
use crate::oracle::quad_bivar_relu;
use crate::specfun::{erf, erfc, i_ab, norm_cdf, norm_pdf, SeriesConfig};

/// Half-width of the band around `|ρ| = 1/√2` where neither series branch is
/// trusted and quadrature is used instead.
pub const FALLBACK_BAND: f64 = 5e-3;

/// Above this `|ρ|` the covariance is treated as numerically singular.
pub const NEAR_SINGULAR_RHO: f64 = 1.0 - 1e-6;

/// `E[max(x,0)]` for `x ~ N(μ, σ²)`: `μ Φ(μ/σ) + σ φ(μ/σ)`.
///
/// Written as `½μ erfc(−μ/(√2σ)) + σ/√(2π) e^{−μ²/2σ²}`, which is the
/// `½μ − ½μ erf(−μ/(√2σ)) + …` form without the cancellation for `μ ≪ 0`.
pub fn relu_mean(mu: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return mu.max(0.0);
    }
    let z = mu / sigma;
    0.5 * mu * erfc(-z / SQRT_2) + sigma * norm_pdf(z)
}

/// `E[max(x,0)²] = σ²/2` for `x ~ N(0, σ²)`.
pub fn relu_sq_mean_zero(sigma: f64) -> f64 {
    0.5 * sigma * sigma
}

/// `E[max(x,0)²] = (μ² + σ²) Φ(μ/σ) + μσ φ(μ/σ)` for `x ~ N(μ, σ²)`.
/// `σ = 0` gives `max(μ,0)²`.
pub fn relu_sq_mean(mu: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        let r = mu.max(0.0);
        return r * r;
    }
    let z = mu / sigma;
    (mu * mu + sigma * sigma) * norm_cdf(z) + mu * sigma * norm_pdf(z)
}

/// `E[max(x₁,0) max(x₂,0)]` for a zero-mean pair with covariance `σ₁₂`:
/// `(σ₁₂ asin(ρ) + σ₁σ₂√(1−ρ²))/(2π) + σ₁₂/4`.
pub fn bivar_relu_zero_mean(sigma1: f64, sigma2: f64, sigma12: f64) -> Result<f64> {
    if !(sigma1 >= 0.0) || !(sigma2 >= 0.0) {
        return Err(Error::domain(
            "bivar_relu_zero_mean",
            format!("standard deviations must be nonnegative, got {sigma1}, {sigma2}"),
        ));
    }
    let scale = sigma1 * sigma2;
    if !(sigma12.abs() <= scale * (1.0 + 1e-12)) {
        return Err(Error::domain(
            "bivar_relu_zero_mean",
            format!("|σ₁₂| = {} exceeds σ₁σ₂ = {scale}", sigma12.abs()),
        ));
    }
    if scale == 0.0 {
        return Ok(0.0);
    }
    let rho = (sigma12 / scale).clamp(-1.0, 1.0);
    Ok((sigma12 * rho.asin() + scale * (1.0 - rho * rho).sqrt()) / (2.0 * PI) + 0.25 * sigma12)
}

/// Parameters of a bivariate normal `(x₁, x₂)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateParams {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
}

impl BivariateParams {
    pub fn new(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64, rho: f64) -> Result<Self> {
        if !(mu1.is_finite() && mu2.is_finite()) {
            return Err(Error::domain("BivariateParams", "means must be finite"));
        }
        if !(sigma1 > 0.0 && sigma2 > 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
            return Err(Error::domain(
                "BivariateParams",
                format!("standard deviations must be positive, got {sigma1}, {sigma2}"),
            ));
        }
        if !(rho.abs() <= 1.0) {
            return Err(Error::domain("BivariateParams", format!("|ρ| = {} > 1", rho.abs())));
        }
        Ok(Self {
            mu1,
            mu2,
            sigma1,
            sigma2,
            rho,
        })
    }

    /// The same pair with the two coordinates exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            mu1: self.mu2,
            mu2: self.mu1,
            sigma1: self.sigma2,
            sigma2: self.sigma1,
            rho: self.rho,
        }
    }

    pub fn sigma12(&self) -> f64 {
        self.rho * self.sigma1 * self.sigma2
    }

    fn det(&self) -> f64 {
        let s = self.sigma1 * self.sigma2;
        s * s * (1.0 - self.rho * self.rho)
    }
}

/// Quantities shared by `Ω` and the series branches.
struct Derived {
    sqrt_det: f64,
    /// `e₁ᵀ Σ̃ μ = (σ₂μ₁ − ρσ₁μ₂)/√|Σ|`
    e1: f64,
    /// `e₂ᵀ Σ̃ μ = (σ₁μ₂ − ρσ₂μ₁)/√|Σ|`
    e2: f64,
    /// `μᵀ Σ⁻¹ μ`
    quad_form: f64,
}

impl Derived {
    fn new(p: &BivariateParams) -> Self {
        let det = p.det();
        let sqrt_det = det.sqrt();
        let (m1, m2, s1, s2, r) = (p.mu1, p.mu2, p.sigma1, p.sigma2, p.rho);
        Self {
            sqrt_det,
            e1: (s2 * m1 - r * s1 * m2) / sqrt_det,
            e2: (s1 * m2 - r * s2 * m1) / sqrt_det,
            quad_form: (s2 * s2 * m1 * m1 - 2.0 * r * s1 * s2 * m1 * m2 + s1 * s1 * m2 * m2) / det,
        }
    }
}

fn omega_from(p: &BivariateParams, d: &Derived) -> f64 {
    let (m1, m2, s1, s2) = (p.mu1, p.mu2, p.sigma1, p.sigma2);
    let c = 1.0 / (2.0 * (2.0 * PI).sqrt());
    d.sqrt_det / (2.0 * PI) * (-0.5 * d.quad_form).exp()
        + c * m1 * s2 * (-0.5 * (m2 / s2).powi(2)).exp() * erfc(-d.e1 / SQRT_2)
        + c * m2 * s1 * (-0.5 * (m1 / s1).powi(2)).exp() * erfc(-d.e2 / SQRT_2)
        + 0.25 * (m1 * m2 + p.sigma12()) * erfc(-m2 / (SQRT_2 * s2))
}

/// The closed-form part `Ω` of the general bivariate moment. Requires `|ρ| < 1`.
pub fn omega(p: &BivariateParams) -> Result<f64> {
    if !(p.rho.abs() < 1.0) {
        return Err(Error::domain("omega", "|ρ| = 1 makes the covariance singular"));
    }
    Ok(omega_from(p, &Derived::new(p)))
}

/// How [`bivar_relu_general`] evaluated a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BivariateRoute {
    /// `|ρ| < 1/√2`: series in `a₁ = ρ/√(1−ρ²)`.
    SeriesLowCorrelation,
    /// `|ρ| > 1/√2`: series in `a₂ = √(1−ρ²)/|ρ|`.
    SeriesHighCorrelation,
    /// Inside the branch-boundary band or near-singular: 2-D quadrature.
    Quadrature,
}

/// True when `ρ` falls where the series is not used.
pub fn in_fallback_band(rho: f64) -> bool {
    (rho.abs() - FRAC_1_SQRT_2).abs() < FALLBACK_BAND || rho.abs() > NEAR_SINGULAR_RHO
}

/// `E[max(x₁,0) max(x₂,0)]` for a general bivariate normal.
pub fn bivar_relu_general(p: &BivariateParams, cfg: SeriesConfig) -> Result<f64> {
    bivar_relu_general_routed(p, cfg).map(|(v, _)| v)
}

/// [`bivar_relu_general`] together with the route that produced the value.
pub fn bivar_relu_general_routed(p: &BivariateParams, cfg: SeriesConfig) -> Result<(f64, BivariateRoute)> {
    if in_fallback_band(p.rho) {
        return Ok((quad_bivar_relu(p)?, BivariateRoute::Quadrature));
    }
    let d = Derived::new(p);
    let omega = omega_from(p, &d);
    let k = (p.mu1 * p.mu2 + p.sigma12()) / PI;
    let r = p.rho;
    let lower_limit = -p.mu2 / (SQRT_2 * p.sigma2);
    if r.abs() < FRAC_1_SQRT_2 {
        let a1 = r / (1.0 - r * r).sqrt();
        let b1 = p.mu1 / (SQRT_2 * p.sigma1 * (1.0 - r * r).sqrt());
        let series = i_ab(a1, b1, f64::INFINITY, cfg)? - i_ab(a1, b1, lower_limit, cfg)?;
        Ok((omega + k * series, BivariateRoute::SeriesLowCorrelation))
    } else {
        let s = r.signum();
        let a2 = (1.0 - r * r).sqrt() / r.abs();
        let b2 = -p.mu1 / (SQRT_2 * r * p.sigma1);
        let e1 = d.e1 / SQRT_2;
        let series = PI / 4.0 * s + PI / 4.0 * erf(e1) * erf(-lower_limit)
            - s * (i_ab(a2, b2, f64::INFINITY, cfg)? - i_ab(a2, b2, s * e1, cfg)?);
        Ok((omega + k * series, BivariateRoute::SeriesHighCorrelation))
    }
}
