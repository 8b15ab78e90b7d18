//! Scalar special functions and the truncated series for
//! `I_{a,b}(x) = (√π/2) ∫₀ˣ e^{−t²} erf(at + b) dt`.
//!
//! The series expands `erf(at + b)` in Hermite polynomials of `b`, which
//! turns every term into a regularized lower incomplete gamma function of
//! `x²`. It converges only for `|a| < 1`; callers with `|a| > 1` are expected
//! to swap the roles of the two variables first (see
//! [`crate::relu_moments::bivar_relu_general`]).

use std::f64::consts::{FRAC_2_SQRT_PI, PI, SQRT_2};

use crate::error::{Error, Result};

/// Largest Hermite degree accepted by [`hermite`].
pub const MAX_HERMITE_DEGREE: usize = 200;

/// Summands kept in library calls.
pub const DEFAULT_TERMS: usize = 20;

/// Summands kept in bulk experiments (tightness runs, attacks).
pub const BULK_TERMS: usize = 5;

const GAMMA_MAX_ITER: usize = 2000;

/// Truncation of the `I_{a,b}` series.
///
/// One "term" is one value of the summation index `u`, i.e. the pair of
/// Hermite polynomials `H_{2u}` and `H_{2u+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SeriesConfig {
    terms: usize,
}

impl SeriesConfig {
    pub fn new(terms: usize) -> Result<Self> {
        if terms == 0 {
            return Err(Error::domain("SeriesConfig", "terms must be at least 1"));
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> usize {
        self.terms
    }

    /// Five terms, the setting used inside bulk experiments.
    pub fn bulk() -> Self {
        Self { terms: BULK_TERMS }
    }
}

impl Default for SeriesConfig {
    fn default() -> Self {
        Self {
            terms: DEFAULT_TERMS,
        }
    }
}

/// Error function `(2/√π) ∫₀ˣ e^{−t²} dt`.
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Complementary error function `1 − erf(x)`, accurate in the upper tail.
#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Physicists' Hermite polynomial `H_n(x)` via `H_{n+1} = 2x H_n − 2n H_{n−1}`.
///
/// Degrees above [`MAX_HERMITE_DEGREE`] are rejected, and a value that leaves
/// the finite range is reported as [`Error::Overflow`] rather than returned as
/// an infinity.
pub fn hermite(n: usize, x: f64) -> Result<f64> {
    if n > MAX_HERMITE_DEGREE {
        return Err(Error::domain(
            "hermite",
            format!("degree {n} exceeds {MAX_HERMITE_DEGREE}"),
        ));
    }
    if !x.is_finite() {
        return Err(Error::domain("hermite", format!("non-finite argument {x}")));
    }
    let mut prev = 1.0;
    if n == 0 {
        return Ok(prev);
    }
    let mut cur = 2.0 * x;
    for k in 1..n {
        let next = 2.0 * x * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
        if !cur.is_finite() {
            return Err(Error::Overflow {
                function: "hermite",
                detail: format!("H_{} ({x}) is not representable", k + 1),
            });
        }
    }
    Ok(cur)
}

/// Regularized lower incomplete gamma function `P(s, x) = γ(s, x)/Γ(s)`.
///
/// `x = +∞` yields 1. Uses the power series below `x = s + 1` and the
/// Lentz continued fraction for `Q = 1 − P` above it.
pub fn gamma_p(s: f64, x: f64) -> Result<f64> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::domain("gamma_p", format!("shape {s} must be positive")));
    }
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain("gamma_p", format!("argument {x} must be nonnegative")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let log_prefactor = -x + s * x.ln() - libm::lgamma(s);
    if x < s + 1.0 {
        let mut ap = s;
        let mut term = 1.0 / s;
        let mut sum = term;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * f64::EPSILON {
                return Ok((sum.ln() + log_prefactor).exp().min(1.0));
            }
        }
        Err(Error::NonConvergence {
            routine: "gamma_p series",
            iterations: GAMMA_MAX_ITER,
        })
    } else {
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - s;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - s);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < f64::EPSILON {
                let q = (h.ln() + log_prefactor).exp();
                return Ok((1.0 - q).clamp(0.0, 1.0));
            }
        }
        Err(Error::NonConvergence {
            routine: "gamma_p continued fraction",
            iterations: GAMMA_MAX_ITER,
        })
    }
}

// Rescaling threshold for the running Hermite terms.
const RESCALE_UP: f64 = 1e200;
const LN_RESCALE: f64 = 460.517_018_598_809_1; // ln(1e200)

/// Truncated series for `I_{a,b}(x) = (√π/2) ∫₀ˣ e^{−t²} erf(at + b) dt`.
///
/// ```text
/// I = π/4 erf(x) erf(b) + √π/2 e^{−b²} Σ_u [ (a/2)^{2u+1}/Γ(u+3/2) P(u+1, x²) H_{2u}(b)
///                                       − sign(x) (a/2)^{2u+2}/Γ(u+2) P(u+3/2, x²) H_{2u+1}(b) ]
/// ```
///
/// `x` may be `±∞`. Requires `|a| < 1`.
pub fn i_ab(a: f64, b: f64, x: f64, cfg: SeriesConfig) -> Result<f64> {
    if !(a.abs() < 1.0) {
        return Err(Error::domain(
            "i_ab",
            format!("|a| = {} must be < 1 for the series to converge", a.abs()),
        ));
    }
    if !b.is_finite() || x.is_nan() {
        return Err(Error::domain("i_ab", format!("invalid arguments b={b}, x={x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let x2 = x * x;
    let sign_x = x.signum();
    let lead = PI / 4.0 * erf(x) * erf(b);

    // t_n = (a/2)^{n+1} H_n(b) / Γ(n/2 + 3/2), carried as t · exp(log_scale)
    // with e^{−b²} folded into log_scale so that neither factor overflows.
    let c = 0.5 * a;
    let mut log_scale = -b * b;
    let mut t_prev = 0.0;
    let mut t = c * FRAC_2_SQRT_PI; // c / Γ(3/2)
    // ratio_n = Γ(n/2 + 3/2) / Γ(n/2 + 2)
    let mut ratio = 0.5 * PI.sqrt();
    let mut sum = 0.0;

    for n in 0..2 * cfg.terms() {
        let shape = 0.5 * n as f64 + 1.0;
        let p = gamma_p(shape, x2)?;
        let weight = if n % 2 == 0 { p } else { -sign_x * p };
        let scaled = t * weight;
        if scaled != 0.0 {
            let magnitude = scaled.abs().ln() + log_scale;
            sum += scaled.signum() * magnitude.exp();
        }

        let nf = n as f64;
        let next = 2.0 * b * c * ratio * t - 2.0 * nf * c * c * t_prev / (0.5 * nf + 1.0);
        t_prev = t;
        t = next;
        ratio = 1.0 / ((0.5 * (nf + 1.0) + 1.0) * ratio);

        if t.abs() > RESCALE_UP {
            t /= RESCALE_UP;
            t_prev /= RESCALE_UP;
            log_scale += LN_RESCALE;
        }
        if !t.is_finite() {
            return Err(Error::Overflow {
                function: "i_ab",
                detail: format!("term {n} of the series for a={a}, b={b}"),
            });
        }
    }
    Ok(lead + 0.5 * PI.sqrt() * sum)
}
