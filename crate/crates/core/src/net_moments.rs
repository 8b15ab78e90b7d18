//! Mean, second moment and variance of `B relu(A x + c₁) + c₂` for Gaussian `x`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::{pushforward, GaussianSpec, PushforwardGaussian};
use crate::plnet::TruncatedNet;
use crate::relu_moments::{
    bivar_relu_general_routed, bivar_relu_zero_mean, relu_mean, relu_sq_mean, relu_sq_mean_zero, BivariateParams,
    BivariateRoute,
};
use crate::specfun::{norm_cdf, norm_pdf, SeriesConfig};

/// Hidden units with `σ̄ ≤ DETERMINISTIC_TOL·(1 + |μ̄|)` are treated as constants.
pub const DETERMINISTIC_TOL: f64 = 1e-12;

/// Negative variances down to this size are rounding noise and get clipped.
pub const NEGATIVE_VARIANCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentResult {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub second_moment: DVector<f64>,
    pub terms_used: usize,
    /// Hidden-unit pairs evaluated by quadrature rather than the series.
    pub fallback_pairs: usize,
    /// Logits whose variance came out slightly negative and was set to 0.
    pub clipped: Vec<usize>,
}

fn pushed(tn: &TruncatedNet, g: &GaussianSpec) -> Result<PushforwardGaussian> {
    if g.dim() != tn.input_dim() {
        return Err(Error::dims("network moments", tn.input_dim(), g.dim()));
    }
    pushforward(g, tn.a())
}

fn is_deterministic(mu: f64, sigma: f64) -> bool {
    sigma <= DETERMINISTIC_TOL * (1.0 + mu.abs())
}

/// `E[relu(μ̄_v + σ̄_v z)]` for every hidden unit.
fn hidden_means(pf: &PushforwardGaussian) -> DVector<f64> {
    DVector::from_fn(pf.dim(), |v, _| {
        let (mu, sigma) = (pf.mean[v], pf.std(v));
        if is_deterministic(mu, sigma) {
            mu.max(0.0)
        } else {
            relu_mean(mu, sigma)
        }
    })
}

/// `E[g(x)] = B E[relu(Ax + c₁)] + c₂`, one entry per logit.
pub fn mean(tn: &TruncatedNet, g: &GaussianSpec) -> Result<DVector<f64>> {
    let pf = pushed(tn, g)?;
    Ok(tn.b().weights() * hidden_means(&pf) + tn.b().bias())
}

/// `E[g(x)²]` when `μ_x`, `c₁` and `c₂` are all zero, using the arcsine
/// kernel for every pair of hidden units.
pub fn second_moment_zero_mean(tn: &TruncatedNet, g: &GaussianSpec) -> Result<DVector<f64>> {
    if g.mean().iter().any(|m| *m != 0.0)
        || tn.a().bias().iter().any(|c| *c != 0.0)
        || tn.b().bias().iter().any(|c| *c != 0.0)
    {
        return Err(Error::Precondition(
            "zero-mean second moment needs μ_x = 0, c₁ = 0 and c₂ = 0; use variance_general".into(),
        ));
    }
    let pf = pushed(tn, g)?;
    let p = pf.dim();
    let sd: Vec<f64> = (0..p).map(|v| pf.std(v)).collect();
    let pairs = pair_table(p, |v1, v2| {
        let s12 = pf.cov[(v1, v2)].clamp(-sd[v1] * sd[v2], sd[v1] * sd[v2]);
        bivar_relu_zero_mean(sd[v1], sd[v2], s12).map(|v| (v, false))
    })?;
    let b = tn.b().weights();
    Ok(DVector::from_fn(tn.output_dim(), |i, _| {
        let diag: f64 = (0..p).map(|r| b[(i, r)] * b[(i, r)] * relu_sq_mean_zero(sd[r])).sum();
        diag + 2.0 * cross_sum(b, i, &pairs)
    }))
}

/// Lower-triangular table `T[v₁][v₂]`, `v₂ < v₁`, built in parallel over `v₁`.
/// The flag records a quadrature fallback.
fn pair_table<F>(p: usize, f: F) -> Result<Vec<Vec<(f64, bool)>>>
where
    F: Fn(usize, usize) -> Result<(f64, bool)> + Sync,
{
    (0..p)
        .into_par_iter()
        .map(|v1| (0..v1).map(|v2| f(v1, v2)).collect::<Result<Vec<_>>>())
        .collect()
}

fn cross_sum(b: &DMatrix<f64>, i: usize, pairs: &[Vec<(f64, bool)>]) -> f64 {
    let mut total = 0.0;
    for (v1, row) in pairs.iter().enumerate() {
        let w1 = b[(i, v1)];
        if w1 == 0.0 {
            continue;
        }
        for (v2, (value, _)) in row.iter().enumerate() {
            let w2 = b[(i, v2)];
            if w2 != 0.0 {
                total += w1 * w2 * value;
            }
        }
    }
    total
}

/// `E[relu(h₁) relu(h₂)]` for one pair of hidden pre-activations.
fn pair_moment(pf: &PushforwardGaussian, v1: usize, v2: usize, cfg: SeriesConfig) -> Result<(f64, bool)> {
    let (m1, m2) = (pf.mean[v1], pf.mean[v2]);
    let (s1, s2) = (pf.std(v1), pf.std(v2));
    match (is_deterministic(m1, s1), is_deterministic(m2, s2)) {
        (true, true) => Ok((m1.max(0.0) * m2.max(0.0), false)),
        (true, false) => Ok((m1.max(0.0) * relu_mean(m2, s2), false)),
        (false, true) => Ok((relu_mean(m1, s1) * m2.max(0.0), false)),
        (false, false) => {
            let rho = (pf.cov[(v1, v2)] / (s1 * s2)).clamp(-1.0, 1.0);
            let params = BivariateParams::new(m1, m2, s1, s2, rho)?;
            let (v, route) = bivar_relu_general_routed(&params, cfg)?;
            Ok((v, route == BivariateRoute::Quadrature))
        }
    }
}

/// Mean, second moment and variance for general `μ_x`, `c₁`, `c₂`.
///
/// The centered part `E[(g_i − c₂(i))²]` is assembled from the diagonal
/// `E[relu(h_r)²]` and the pairwise `E[relu(h₁)relu(h₂)]`; `c₂` is added back
/// as `2c₂·E[g_i − c₂] + c₂²`.
pub fn variance_general(tn: &TruncatedNet, g: &GaussianSpec, cfg: SeriesConfig) -> Result<MomentResult> {
    let pf = pushed(tn, g)?;
    let p = pf.dim();
    let b = tn.b().weights();
    let c2 = tn.b().bias();

    // Only pairs that some logit actually weights are evaluated.
    let needed = |v1: usize, v2: usize| (0..b.nrows()).any(|i| b[(i, v1)] != 0.0 && b[(i, v2)] != 0.0);
    let pairs = pair_table(p, |v1, v2| {
        if needed(v1, v2) {
            pair_moment(&pf, v1, v2, cfg)
        } else {
            Ok((0.0, false))
        }
    })?;
    let fallback_pairs = pairs.iter().flatten().filter(|(_, fb)| *fb).count();

    let hidden = hidden_means(&pf);
    let diag_terms = DVector::from_fn(p, |r, _| {
        let (mu, sigma) = (pf.mean[r], pf.std(r));
        if is_deterministic(mu, sigma) {
            mu.max(0.0).powi(2)
        } else {
            relu_sq_mean(mu, sigma)
        }
    });

    let constant: Vec<bool> = (0..p).map(|r| is_deterministic(pf.mean[r], pf.std(r))).collect();
    let d = tn.output_dim();
    let mut mean = DVector::zeros(d);
    let mut second_moment = DVector::zeros(d);
    let mut variance = DVector::zeros(d);
    let mut clipped = Vec::new();
    for i in 0..d {
        let centered_mean: f64 = (0..p).map(|r| b[(i, r)] * hidden[r]).sum();
        let diag: f64 = (0..p).map(|r| b[(i, r)] * b[(i, r)] * diag_terms[r]).sum();
        let centered_second = diag + 2.0 * cross_sum(b, i, &pairs);
        let mut var = centered_second - centered_mean * centered_mean;
        if (0..p).all(|r| b[(i, r)] == 0.0 || constant[r]) {
            var = 0.0;
        } else if var < 0.0 {
            let scale = centered_second.abs().max(centered_mean * centered_mean).max(1.0);
            if var < -NEGATIVE_VARIANCE_TOL * scale {
                return Err(Error::Precondition(format!(
                    "logit {i} has variance {var:e}; the truncated series is too short for this input"
                )));
            }
            clipped.push(i);
            var = 0.0;
        }
        mean[i] = centered_mean + c2[i];
        variance[i] = var;
        second_moment[i] = var + mean[i] * mean[i];
    }
    Ok(MomentResult {
        mean,
        variance,
        second_moment,
        terms_used: cfg.terms(),
        fallback_pairs,
        clipped,
    })
}

/// Variance of the model that ignores the input mean: the zero-mean second
/// moment for `N(0, Σ_x)`, `c₁ = 0`, minus the square of its zero-mean mean.
/// Used as the baseline in tightness comparisons.
pub fn variance_zero_mean_model(tn: &TruncatedNet, g: &GaussianSpec) -> Result<DVector<f64>> {
    let n = tn.input_dim();
    let centered_g = g.with_mean(DVector::zeros(n))?;
    let a0 = crate::plnet::AffineMap::new(tn.a().weights().clone(), DVector::zeros(tn.hidden_width()))?;
    let b0 = crate::plnet::AffineMap::new(tn.b().weights().clone(), DVector::zeros(tn.output_dim()))?;
    let tn0 = TruncatedNet::new(a0, b0, tn.source_point().clone(), tn.layer_index())?;
    let second = second_moment_zero_mean(&tn0, &centered_g)?;
    let m = mean(&tn0, &centered_g)?;
    Ok(DVector::from_fn(second.len(), |i, _| (second[i] - m[i] * m[i]).max(0.0)))
}

/// `∂E[g_logit]/∂μ_x = Aᵀ (B(logit,:)ᵀ ⊙ Φ(μ̄/σ̄))`.
///
/// A unit with vanishing `σ̄` contributes the one-sided derivative `1[μ̄ > 0]`.
pub fn mean_gradient_mu(tn: &TruncatedNet, g: &GaussianSpec, logit: usize) -> Result<DVector<f64>> {
    if logit >= tn.output_dim() {
        return Err(Error::Precondition(format!(
            "logit {logit} out of range for {} outputs",
            tn.output_dim()
        )));
    }
    let pf = pushed(tn, g)?;
    let gates = activation_probabilities(&pf);
    let row = tn.b().weights().row(logit).transpose();
    Ok(tn.a().weights().transpose() * row.component_mul(&gates))
}

/// Jacobian of the expected logits with respect to `μ_x` (`d × n`).
pub fn mean_jacobian_mu(tn: &TruncatedNet, g: &GaussianSpec) -> Result<DMatrix<f64>> {
    let pf = pushed(tn, g)?;
    let gates = activation_probabilities(&pf);
    let mut scaled_a = tn.a().weights().clone();
    for (r, mut row) in scaled_a.row_iter_mut().enumerate() {
        row *= gates[r];
    }
    Ok(tn.b().weights() * scaled_a)
}

/// `P(h_v > 0)` for every hidden unit.
fn activation_probabilities(pf: &PushforwardGaussian) -> DVector<f64> {
    DVector::from_fn(pf.dim(), |v, _| {
        let (mu, sigma) = (pf.mean[v], pf.std(v));
        if is_deterministic(mu, sigma) {
            if mu > 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            norm_cdf(mu / sigma)
        }
    })
}

/// `∂E[g]/∂σ̄_v`-chain for isotropic input `N(μ, s I)`: derivative of the
/// expected logits with respect to the variance `s`.
///
/// `∂/∂s relu_mean(μ̄_v, σ̄_v) = φ(μ̄_v/σ̄_v) · ‖A_v‖² / (2σ̄_v)`.
pub fn mean_gradient_isotropic_variance(tn: &TruncatedNet, g: &GaussianSpec) -> Result<DVector<f64>> {
    let pf = pushed(tn, g)?;
    let a = tn.a().weights();
    let dh = DVector::from_fn(pf.dim(), |v, _| {
        let (mu, sigma) = (pf.mean[v], pf.std(v));
        if is_deterministic(mu, sigma) {
            0.0
        } else {
            norm_pdf(mu / sigma) * a.row(v).norm_squared() / (2.0 * sigma)
        }
    });
    Ok(tn.b().weights() * dh)
}
