//! `min ‖μ‖₁ + TV_ε(μ) + λ·Σ max(0, c(μ))²` by proximal gradient, with `λ`
//! doubled until the margin constraint holds.
//!
//! Each constraint is `wᵀE(M + sμ) + γ + z·sd ≤ 0` for a fixed logit
//! combination `w`, where `sd` is the standard deviation of `wᵀg` at the
//! current iterate. `sd` and the competing class (untargeted case) are
//! refreshed whenever `λ` changes and held fixed in between, so the smooth
//! part is differentiable within a phase.

use nalgebra::{DMatrix, DVector};

use super::tv::{tv, tv_gradient};
use super::{
    achieved_margin, expected_logits, finish, logits_and_jacobian, AttackProblem, AttackResult, AttackStatus,
};
use crate::error::{Error, Result};
use crate::net_moments::variance_general;
use crate::plnet::{AffineMap, TruncatedNet};
use crate::specfun::SeriesConfig;

/// The sparse-smooth problem keeps `Σ_x = I`.
const SIGMA_SQ: f64 = 1.0;

/// A tightened constraint is considered met once violated by less than this.
const FEASIBILITY_TOL: f64 = 1e-3;

const MIN_STEP: f64 = 1e-20;

/// Frozen smooth part `TV_ε(μ) + λ Σ_c max(0, w_cᵀE + offset_c)²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothPenalty {
    pub lambda: f64,
    /// `(w, offset)` per constraint; `w` has one entry per logit.
    pub constraints: Vec<(DVector<f64>, f64)>,
}

fn unit_difference(d: usize, plus: usize, minus: usize) -> DVector<f64> {
    let mut w = DVector::zeros(d);
    w[plus] += 1.0;
    w[minus] -= 1.0;
    w
}

/// Standard deviation of `wᵀg(x)` under the attack distribution.
fn combination_sd(problem: &AttackProblem, w: &DVector<f64>, noise_mean: &DVector<f64>) -> Result<f64> {
    let tn = &problem.truncated;
    let b = AffineMap::new(
        DMatrix::from_row_slice(1, tn.hidden_width(), (w.transpose() * tn.b().weights()).as_slice()),
        DVector::from_element(1, w.dot(tn.b().bias())),
    )?;
    let combined = TruncatedNet::new(tn.a().clone(), b, tn.source_point().clone(), tn.layer_index())?;
    let cfg = SeriesConfig::new(problem.settings.series_terms.max(1))?;
    let moments = variance_general(&combined, &problem.noise_distribution(noise_mean, SIGMA_SQ)?, cfg)?;
    Ok(moments.variance[0].sqrt())
}

impl SmoothPenalty {
    /// Freezes the constraint set at `mu`.
    pub fn at(problem: &AttackProblem, mu: &DVector<f64>, lambda: f64) -> Result<Self> {
        let s = &problem.settings;
        let d = problem.classes();
        let noise_mean = mu * s.mean_scale;
        let logits = expected_logits(problem, &noise_mean, SIGMA_SQ)?;
        let sd = |w: &DVector<f64>| -> Result<f64> {
            if s.confidence_z == 0.0 {
                Ok(0.0)
            } else {
                combination_sd(problem, w, &noise_mean)
            }
        };
        let constraints = match problem.target_class {
            Some(j) => (0..d)
                .filter(|&k| k != j)
                .map(|k| {
                    let w = unit_difference(d, k, j);
                    Ok((w.clone(), s.gamma + s.confidence_z * sd(&w)?))
                })
                .collect::<Result<Vec<_>>>()?,
            None => {
                let i = problem.source_class;
                let mut best: Option<(f64, DVector<f64>, f64)> = None;
                for k in (0..d).filter(|&k| k != i) {
                    let w = unit_difference(d, i, k);
                    let offset = s.gamma + s.confidence_z * sd(&w)?;
                    let value = w.dot(&logits) + offset;
                    if best.as_ref().is_none_or(|(v, _, _)| value < *v) {
                        best = Some((value, w, offset));
                    }
                }
                let (_, w, offset) = best.ok_or(Error::Precondition("need at least two classes".into()))?;
                vec![(w, offset)]
            }
        };
        Ok(Self { lambda, constraints })
    }

    /// Largest `w_cᵀE + offset_c` at `mu`.
    pub fn violation(&self, problem: &AttackProblem, mu: &DVector<f64>) -> Result<f64> {
        let logits = expected_logits(problem, &(mu * problem.settings.mean_scale), SIGMA_SQ)?;
        Ok(self
            .constraints
            .iter()
            .map(|(w, off)| w.dot(&logits) + off)
            .fold(f64::NEG_INFINITY, f64::max))
    }

    /// Smooth part of the objective and its gradient.
    pub fn value_and_gradient(&self, problem: &AttackProblem, mu: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let s = &problem.settings;
        let (w, h) = image_shape(problem)?;
        let mut value = tv(mu, w, h, s.tv_epsilon)?;
        let mut grad = tv_gradient(mu, w, h, s.tv_epsilon)?;
        let (logits, jac) = logits_and_jacobian(problem, &(mu * s.mean_scale), SIGMA_SQ)?;
        let mut weights = DVector::zeros(problem.classes());
        for (wc, off) in &self.constraints {
            let c = wc.dot(&logits) + off;
            if c > 0.0 {
                value += self.lambda * c * c;
                weights += wc * (2.0 * self.lambda * c);
            }
        }
        grad += jac.transpose() * weights * s.mean_scale;
        Ok((value, grad))
    }
}

fn image_shape(problem: &AttackProblem) -> Result<(usize, usize)> {
    let (w, h) = problem
        .shape
        .ok_or_else(|| Error::Precondition("sparse-smooth attack needs the image shape".into()))?;
    if w * h != problem.dim() {
        return Err(Error::dims("image shape", problem.dim(), w * h));
    }
    Ok((w, h))
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Sparse and smooth mean perturbation with `σ² = 1`. Uses the target class
/// when the problem has one and the untargeted constraint otherwise.
pub fn sparse_smooth_attack(problem: &AttackProblem) -> Result<AttackResult> {
    problem.validate()?;
    let (w, h) = image_shape(problem)?;
    let s = &problem.settings;
    let n = problem.dim();
    let beta = s.beta;
    let l1 = |mu: &DVector<f64>| mu.iter().map(|v| v.abs()).sum::<f64>();

    let mut mu = DVector::zeros(n);
    let mut lambda = s.lambda_penalty;
    let mut doublings = 0;
    let mut trace = Vec::new();
    let mut phase_starts = Vec::new();
    let mut iterations = 0;
    let mut hit_cap = false;

    loop {
        let penalty = SmoothPenalty::at(problem, &mu, lambda)?;
        let smooth_at = |v: &DVector<f64>| penalty.value_and_gradient(problem, v);
        let (mut f_x, _) = smooth_at(&mu)?;
        f_x += l1(&mu);
        phase_starts.push(trace.len());
        trace.push(f_x);

        // Monotone FISTA: the extrapolated point `y` drives the step, the
        // reported iterate `mu` only moves when the objective does not increase.
        let mut y = mu.clone();
        let mut theta: f64 = 1.0;
        let mut t = s.step_size;
        let mut stationary = false;
        for _ in 0..s.max_iters {
            iterations += 1;
            let (s_y, g_y) = smooth_at(&y)?;
            let (z, s_z, step) = loop {
                let z = DVector::from_fn(n, |k, _| soft_threshold(y[k] - t * g_y[k], t).clamp(-beta, beta));
                let d = &z - &y;
                let step_sq = d.norm_squared();
                let (s_z, _) = smooth_at(&z)?;
                if step_sq == 0.0
                    || s_z <= s_y + g_y.dot(&d) + step_sq / (2.0 * t) + 1e-12 * s_y.abs().max(1.0)
                {
                    break (z, s_z, step_sq.sqrt());
                }
                t *= 0.5;
                if t < MIN_STEP {
                    break (y.clone(), s_y, 0.0);
                }
            };
            let f_z = l1(&z) + s_z;
            let previous = mu.clone();
            if f_z <= f_x {
                mu = z.clone();
                f_x = f_z;
            }
            trace.push(f_x);
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            y = &mu + (&z - &mu) * (theta / theta_next) + (&mu - &previous) * ((theta - 1.0) / theta_next);
            theta = theta_next;
            if step <= s.tolerance * (1.0 + mu.norm()) {
                stationary = true;
                break;
            }
        }
        let refreshed = SmoothPenalty::at(problem, &mu, lambda)?;
        let violation = refreshed.violation(problem, &mu)?;
        tracing::debug!(lambda, violation, stationary, "sparse-smooth phase done");
        if violation <= FEASIBILITY_TOL {
            break;
        }
        if doublings >= s.lambda_doublings {
            hit_cap = true;
            break;
        }
        doublings += 1;
        lambda *= 2.0;
    }

    let noise_mean = &mu * s.mean_scale;
    let logits = expected_logits(problem, &noise_mean, SIGMA_SQ)?;
    let margin = achieved_margin(problem, &logits);
    let success = margin >= s.gamma;
    let status = if !success {
        AttackStatus::Failed
    } else if hit_cap {
        AttackStatus::IterationLimit
    } else {
        AttackStatus::Converged
    };
    let result = AttackResult {
        mu_x: mu.as_slice().to_vec(),
        sigma_sq: SIGMA_SQ,
        objective_trace: trace,
        phase_starts,
        margin,
        success,
        status,
        fooling_rate: 0.0,
        target_rate: None,
        sparsity: 0.0,
        tv_value: Some(tv(&mu, w, h, s.tv_epsilon)?),
        iterations,
        final_lambda: Some(lambda),
    };
    finish(problem, result, &noise_mean)
}
