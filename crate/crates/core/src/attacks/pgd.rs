//! Projected gradient descent over `(μ_x, σ²)` for the targeted and
//! support-restricted problems.

use nalgebra::DVector;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    achieved_margin, expected_logits, finish, logits_and_jacobian, max_excluding, AttackProblem, AttackResult,
    AttackStatus, MIN_SIGMA_SQ,
};
use crate::error::{Error, Result};

// Smallest line-search step before the iterate is declared stationary.
const MIN_STEP: f64 = 1e-20;

/// Which smoothed objective a PGD run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdObjective {
    /// `LSE_τ(E_k, k ≠ j) − E_j`.
    Targeted(usize),
    /// `E_i − LSE_τ(E_k, k ≠ i)`.
    Untargeted(usize),
}

/// `(1/τ) ln Σ_{k≠skip} e^{τ v_k}` and its softmax weights (zero at `skip`).
fn soft_max_excluding(v: &DVector<f64>, skip: usize, tau: f64) -> (f64, DVector<f64>) {
    let top = max_excluding(v, skip);
    let mut w = DVector::zeros(v.len());
    let mut total = 0.0;
    for k in 0..v.len() {
        if k != skip {
            w[k] = (tau * (v[k] - top)).exp();
            total += w[k];
        }
    }
    w /= total;
    (top + total.ln() / tau, w)
}

/// Smoothed value and `μ`-gradient at fixed `σ²`.
fn value_and_mu_gradient(
    problem: &AttackProblem,
    objective: PgdObjective,
    mu: &DVector<f64>,
    sigma_sq: f64,
) -> Result<(f64, DVector<f64>)> {
    let tau = problem.settings.temperature;
    let (logits, jac) = logits_and_jacobian(problem, mu, sigma_sq)?;
    let (value, weights) = match objective {
        PgdObjective::Targeted(j) => {
            let (lse, mut w) = soft_max_excluding(&logits, j, tau);
            w[j] = -1.0;
            (lse - logits[j], w)
        }
        PgdObjective::Untargeted(i) => {
            let (lse, w) = soft_max_excluding(&logits, i, tau);
            let mut w = -w;
            w[i] = 1.0;
            (logits[i] - lse, w)
        }
    };
    Ok((value, jac.transpose() * weights))
}

fn smoothed_value(problem: &AttackProblem, objective: PgdObjective, mu: &DVector<f64>, sigma_sq: f64) -> Result<f64> {
    let tau = problem.settings.temperature;
    let logits = expected_logits(problem, mu, sigma_sq)?;
    Ok(match objective {
        PgdObjective::Targeted(j) => soft_max_excluding(&logits, j, tau).0 - logits[j],
        PgdObjective::Untargeted(i) => logits[i] - soft_max_excluding(&logits, i, tau).0,
    })
}

/// Smoothed objective with its gradient in `μ_x` (analytic) and in `σ²`
/// (central difference with step `1e−4·σ²`).
fn evaluate(
    problem: &AttackProblem,
    objective: PgdObjective,
    mu: &DVector<f64>,
    sigma_sq: f64,
) -> Result<(f64, DVector<f64>, f64)> {
    let (value, grad_mu) = value_and_mu_gradient(problem, objective, mu, sigma_sq)?;
    let h = 1e-4 * sigma_sq;
    let up = smoothed_value(problem, objective, mu, sigma_sq + h)?;
    let down = smoothed_value(problem, objective, mu, sigma_sq - h)?;
    Ok((value, grad_mu, (up - down) / (2.0 * h)))
}

/// Smoothed targeted objective `LSE_τ(E_k, k ≠ j) − E_j` and its gradients.
pub fn targeted_objective(
    problem: &AttackProblem,
    target: usize,
    mu: &DVector<f64>,
    sigma_sq: f64,
) -> Result<(f64, DVector<f64>, f64)> {
    evaluate(problem, PgdObjective::Targeted(target), mu, sigma_sq)
}

/// Smoothed untargeted objective `E_i − LSE_τ(E_k, k ≠ i)` and its gradients.
pub fn untargeted_objective(
    problem: &AttackProblem,
    source: usize,
    mu: &DVector<f64>,
    sigma_sq: f64,
) -> Result<(f64, DVector<f64>, f64)> {
    evaluate(problem, PgdObjective::Untargeted(source), mu, sigma_sq)
}

/// Pixel indices the support attack may change: the explicit list when one is
/// set, otherwise `⌈α·n⌉` indices drawn from the seed. Sorted ascending.
pub fn support_for(problem: &AttackProblem) -> Result<Vec<usize>> {
    let n = problem.dim();
    if let Some(explicit) = &problem.support_indices {
        let mut idx = explicit.clone();
        idx.sort_unstable();
        idx.dedup();
        if idx.len() != explicit.len() || idx.last().is_some_and(|&k| k >= n) {
            return Err(Error::Precondition("support indices must be distinct and in range".into()));
        }
        return Ok(idx);
    }
    let count = ((problem.settings.alpha * n as f64).ceil() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(problem.settings.seed);
    let mut idx = index::sample(&mut rng, n, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn run(problem: &AttackProblem, objective: PgdObjective, mask: Option<&[bool]>) -> Result<AttackResult> {
    problem.validate()?;
    let s = &problem.settings;
    let n = problem.dim();
    let beta = s.beta;
    let project_mu = |v: f64| v.clamp(-beta, beta);
    let project_s = |v: f64| v.clamp(MIN_SIGMA_SQ, s.sigma_max_sq);
    let true_value = |mu: &DVector<f64>, sigma_sq: f64| -> Result<f64> {
        let logits = expected_logits(problem, mu, sigma_sq)?;
        Ok(-achieved_margin(problem, &logits))
    };

    let mut mu = DVector::zeros(n);
    let mut sigma_sq = project_s(s.sigma_sq_init);
    let (mut f, mut g_mu, mut g_s) = evaluate(problem, objective, &mu, sigma_sq)?;
    let mut trace = vec![f];
    let mut status = None;
    let mut iterations = 0;

    if true_value(&mu, sigma_sq)? < 0.0 {
        status = Some(AttackStatus::AlreadyFooled);
    }

    let mut t = s.step_size;
    while status.is_none() && iterations < s.max_iters {
        iterations += 1;
        if let Some(m) = mask {
            for (gk, keep) in g_mu.iter_mut().zip(m) {
                if !keep {
                    *gk = 0.0;
                }
            }
        }
        let accepted = loop {
            let mu_next = DVector::from_fn(n, |k, _| project_mu(mu[k] - t * g_mu[k]));
            let s_next = project_s(sigma_sq - t * g_s);
            let d_mu = &mu_next - &mu;
            let d_s = s_next - sigma_sq;
            let step_sq = d_mu.norm_squared() + d_s * d_s;
            if step_sq == 0.0 {
                break None;
            }
            let f_next = smoothed_value(problem, objective, &mu_next, s_next)?;
            let model = f + g_mu.dot(&d_mu) + g_s * d_s + step_sq / (2.0 * t);
            if f_next <= model + 1e-12 * f.abs().max(1.0) {
                break Some((mu_next, s_next, step_sq.sqrt()));
            }
            t *= 0.5;
            if t < MIN_STEP {
                break None;
            }
        };
        let Some((mu_next, s_next, step)) = accepted else {
            status = Some(AttackStatus::Converged);
            break;
        };
        let scale = 1.0 + mu.norm() + sigma_sq;
        mu = mu_next;
        sigma_sq = s_next;
        (f, g_mu, g_s) = evaluate(problem, objective, &mu, sigma_sq)?;
        trace.push(f);
        if step <= s.tolerance * scale {
            status = Some(AttackStatus::Converged);
        }
        t = (2.0 * t).min(s.step_size);
    }

    let logits = expected_logits(problem, &mu, sigma_sq)?;
    let margin = achieved_margin(problem, &logits);
    let success = margin > 0.0;
    let status = match status {
        Some(AttackStatus::AlreadyFooled) => AttackStatus::AlreadyFooled,
        _ if !success => AttackStatus::Failed,
        Some(st) => st,
        None => AttackStatus::IterationLimit,
    };
    let result = AttackResult {
        mu_x: mu.as_slice().to_vec(),
        sigma_sq,
        objective_trace: trace,
        phase_starts: vec![0],
        margin,
        success,
        status,
        fooling_rate: 0.0,
        target_rate: None,
        sparsity: 0.0,
        tv_value: None,
        iterations,
        final_lambda: None,
    };
    finish(problem, result, &mu)
}

/// Minimizes `max_{k≠j} E_k − E_j` over `|μ_x| ≤ β`, `σ² ∈ [1e−6, σ²_max]`.
///
/// The max is smoothed by log-sum-exp; descent continues past the first sign
/// change so the final margin is as large as the solver can make it.
pub fn targeted_attack(problem: &AttackProblem) -> Result<AttackResult> {
    let j = problem
        .target_class
        .ok_or_else(|| Error::Precondition("targeted attack needs a target class".into()))?;
    if j == problem.source_class {
        return Err(Error::Precondition("target class equals the source class".into()));
    }
    run(problem, PgdObjective::Targeted(j), None)
}

/// Minimizes `E_i − max_{k≠i} E_k` with `μ_x` zero outside a fixed support.
pub fn support_attack(problem: &AttackProblem) -> Result<AttackResult> {
    let support = support_for(problem)?;
    let mut mask = vec![false; problem.dim()];
    for &k in &support {
        mask[k] = true;
    }
    let untargeted = AttackProblem {
        target_class: None,
        ..problem.clone()
    };
    run(&untargeted, PgdObjective::Untargeted(problem.source_class), Some(&mask))
}
