//! Gaussian noise `N(μ_x, σ²I)` that changes a network's expected prediction.
//!
//! Three problems share the machinery here:
//! * [`targeted_attack`]: push the expected logit of a chosen class above all others.
//! * [`support_attack`]: untargeted, with `μ_x` confined to a fixed pixel subset.
//! * [`sparse_smooth_attack`]: smallest `‖μ‖₁ + TV(μ)` whose expected margin
//!   clears a confidence threshold.
//!
//! Expected logits always come from the truncated network; empirical checks in
//! [`verify_attack`] use the original network when one is attached.

mod pgd;
mod sparse;
pub mod tv;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gauss::{sample, GaussianSpec};
use crate::net_moments;
use crate::oracle::BatchForward;
use crate::plnet::{PlNetwork, TruncatedNet};

pub use pgd::{support_attack, support_for, targeted_attack, untargeted_objective, targeted_objective, PgdObjective};
pub use sparse::{sparse_smooth_attack, SmoothPenalty};

/// `|μ_x|` entries below this count as zero when reporting sparsity.
pub const SPARSITY_THRESHOLD: f64 = 1e-3;

/// Lower clip for `σ²`.
pub const MIN_SIGMA_SQ: f64 = 1e-6;

/// Numeric knobs shared by all attack problems.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    /// Box bound `|μ_x| ≤ β`.
    pub beta: f64,
    /// Upper bound for `σ²`.
    pub sigma_max_sq: f64,
    /// Starting `σ²` for the targeted and support problems.
    pub sigma_sq_init: f64,
    /// Fraction of pixels the support attack may touch.
    pub alpha: f64,
    /// Required expected separation `γ` in the sparse-smooth constraint.
    pub gamma: f64,
    /// Initial penalty weight `λ₀`.
    pub lambda_penalty: f64,
    /// How many times `λ` may double before giving up.
    pub lambda_doublings: u32,
    pub tv_epsilon: f64,
    /// Log-sum-exp temperature used to smooth `max` in the objectives.
    pub temperature: f64,
    /// Scale applied to `μ_x` inside the expected logits of the sparse-smooth
    /// constraint; the noise actually drawn is `N(M + scale·μ_x, I)`.
    pub mean_scale: f64,
    /// The sparse-smooth constraint is tightened by `z` standard deviations of
    /// the logit difference it bounds; `0` gives the bare expected-value constraint.
    pub confidence_z: f64,
    /// Iteration cap per solve (per `λ` value for the sparse-smooth problem).
    pub max_iters: usize,
    /// Initial and largest step of the line search.
    pub step_size: f64,
    /// Stop once an accepted step moves the iterate less than this.
    pub tolerance: f64,
    /// Draws used by [`verify_attack`] when an attack reports its fooling rate.
    pub verify_samples: usize,
    /// Series terms for the variance used by the confidence tightening.
    pub series_terms: usize,
    pub seed: u64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            beta: 1.0,
            sigma_max_sq: 2.0,
            sigma_sq_init: 1.0,
            alpha: 1.0,
            gamma: 0.0,
            lambda_penalty: 10.0,
            lambda_doublings: 10,
            tv_epsilon: 1e-3,
            temperature: 20.0,
            mean_scale: 1.0,
            confidence_z: 2.0,
            max_iters: 2000,
            step_size: 1.0,
            tolerance: 1e-9,
            verify_samples: 100,
            series_terms: crate::specfun::DEFAULT_TERMS,
            seed: 0,
        }
    }
}

/// Everything an attack needs.
#[derive(Debug, Clone)]
pub struct AttackProblem {
    pub truncated: TruncatedNet,
    /// The network the truncation came from, used for verification.
    pub original: Option<PlNetwork>,
    /// Clean input `M`.
    pub image: DVector<f64>,
    /// `(w, h)` of the image, required by the sparse-smooth problem.
    pub shape: Option<(usize, usize)>,
    pub source_class: usize,
    pub target_class: Option<usize>,
    /// Explicit support for [`support_attack`]; drawn from the seed otherwise.
    pub support_indices: Option<Vec<usize>>,
    pub settings: AttackSettings,
}

impl AttackProblem {
    pub fn new(truncated: TruncatedNet, image: DVector<f64>, source_class: usize) -> Result<Self> {
        if image.len() != truncated.input_dim() {
            return Err(Error::dims("AttackProblem image", truncated.input_dim(), image.len()));
        }
        if source_class >= truncated.output_dim() {
            return Err(Error::Precondition(format!(
                "source class {source_class} out of range for {} classes",
                truncated.output_dim()
            )));
        }
        Ok(Self {
            truncated,
            original: None,
            image,
            shape: None,
            source_class,
            target_class: None,
            support_indices: None,
            settings: AttackSettings::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.image.len()
    }

    pub fn classes(&self) -> usize {
        self.truncated.output_dim()
    }

    fn validate(&self) -> Result<()> {
        let s = &self.settings;
        if self.image.len() != self.truncated.input_dim() {
            return Err(Error::dims("AttackProblem image", self.truncated.input_dim(), self.image.len()));
        }
        if let Some(net) = &self.original {
            if net.input_dim() != self.dim() || net.output_dim() != self.classes() {
                return Err(Error::Precondition("original network does not match the truncation".into()));
            }
        }
        if self.source_class >= self.classes() || self.target_class.is_some_and(|j| j >= self.classes()) {
            return Err(Error::Precondition("class index out of range".into()));
        }
        let positive = [s.sigma_max_sq, s.step_size, s.temperature, s.tolerance];
        if !(s.beta >= 0.0) || positive.iter().any(|v| !(*v > 0.0)) || !(s.tv_epsilon >= 0.0) {
            return Err(Error::Precondition(format!("invalid attack settings {s:?}")));
        }
        if !(s.alpha > 0.0 && s.alpha <= 1.0) {
            return Err(Error::Precondition(format!("alpha {} must lie in (0, 1]", s.alpha)));
        }
        if !(s.lambda_penalty > 0.0) || !(s.confidence_z >= 0.0) || s.max_iters == 0 {
            return Err(Error::Precondition(format!("invalid attack settings {s:?}")));
        }
        Ok(())
    }

    /// `N(M + μ_x, σ²I)`.
    pub fn noise_distribution(&self, mu_x: &DVector<f64>, sigma_sq: f64) -> Result<GaussianSpec> {
        if mu_x.len() != self.dim() {
            return Err(Error::dims("attack mean", self.dim(), mu_x.len()));
        }
        GaussianSpec::isotropic(&self.image + mu_x, sigma_sq)
    }
}

/// Expected logits of the truncated network under `N(M + μ_x, σ²I)`.
pub fn expected_logits(problem: &AttackProblem, mu_x: &DVector<f64>, sigma_sq: f64) -> Result<DVector<f64>> {
    net_moments::mean(&problem.truncated, &problem.noise_distribution(mu_x, sigma_sq)?)
}

/// Expected logits and their Jacobian in `μ_x` (`d × n`).
pub(crate) fn logits_and_jacobian(
    problem: &AttackProblem,
    mu_x: &DVector<f64>,
    sigma_sq: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let g = problem.noise_distribution(mu_x, sigma_sq)?;
    Ok((
        net_moments::mean(&problem.truncated, &g)?,
        net_moments::mean_jacobian_mu(&problem.truncated, &g)?,
    ))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `max_{k ∉ skip} v_k`.
pub(crate) fn max_excluding(v: &DVector<f64>, skip: usize) -> f64 {
    v.iter()
        .enumerate()
        .filter(|(k, _)| *k != skip)
        .map(|(_, x)| *x)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    /// The expected prediction already satisfied the goal at `μ_x = 0`.
    AlreadyFooled,
    /// Stationary point reached and the goal holds.
    Converged,
    /// Goal holds but the iteration cap was hit first.
    IterationLimit,
    /// The goal does not hold at the returned point.
    Failed,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct AttackResult {
    pub mu_x: Vec<f64>,
    pub sigma_sq: f64,
    /// Objective after every accepted step, starting with the initial point.
    pub objective_trace: Vec<f64>,
    /// Trace indices where a new penalty weight took effect.
    pub phase_starts: Vec<usize>,
    /// Expected-logit separation in favour of the attack: target minus best
    /// other class (targeted), best other class minus source (untargeted).
    pub margin: f64,
    pub success: bool,
    pub status: AttackStatus,
    pub fooling_rate: f64,
    pub target_rate: Option<f64>,
    pub sparsity: f64,
    pub tv_value: Option<f64>,
    pub iterations: usize,
    pub final_lambda: Option<f64>,
}

/// Separation measured on expected logits, as reported in [`AttackResult::margin`].
pub fn achieved_margin(problem: &AttackProblem, logits: &DVector<f64>) -> f64 {
    match problem.target_class {
        Some(j) => logits[j] - max_excluding(logits, j),
        None => max_excluding(logits, problem.source_class) - logits[problem.source_class],
    }
}

/// Fraction of `|μ_x|` entries below [`SPARSITY_THRESHOLD`].
pub fn sparsity(mu_x: &[f64]) -> f64 {
    if mu_x.is_empty() {
        return 1.0;
    }
    mu_x.iter().filter(|v| v.abs() < SPARSITY_THRESHOLD).count() as f64 / mu_x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FoolingStats {
    pub samples: usize,
    /// Predictions different from the source class.
    pub misclassification_rate: f64,
    /// Predictions equal to the target class, for targeted problems.
    pub target_rate: Option<f64>,
}

/// Classifies `samples` draws of `M + x`, `x ~ N(μ_x, σ²I)`.
pub fn verify_attack(
    problem: &AttackProblem,
    mu_x: &DVector<f64>,
    sigma_sq: f64,
    samples: usize,
    seed: u64,
) -> Result<FoolingStats> {
    if samples == 0 {
        return Err(Error::Empty("verification needs at least one sample"));
    }
    let g = problem.noise_distribution(mu_x, sigma_sq)?;
    let draws = sample(&g, samples, seed)?.transpose();
    let outputs = match &problem.original {
        Some(net) => net.forward_columns(&draws),
        None => problem.truncated.forward_columns(&draws),
    };
    let mut missed = 0usize;
    let mut hit = 0usize;
    for col in outputs.column_iter() {
        let k = argmax(col.as_slice());
        if k != problem.source_class {
            missed += 1;
        }
        if Some(k) == problem.target_class {
            hit += 1;
        }
    }
    let n = samples as f64;
    Ok(FoolingStats {
        samples,
        misclassification_rate: missed as f64 / n,
        target_rate: problem.target_class.map(|_| hit as f64 / n),
    })
}

/// Fills in the verification-dependent fields of a result.
pub(crate) fn finish(
    problem: &AttackProblem,
    mut result: AttackResult,
    noise_mean: &DVector<f64>,
) -> Result<AttackResult> {
    let s = &problem.settings;
    let stats = verify_attack(problem, noise_mean, result.sigma_sq, s.verify_samples.max(1), s.seed)?;
    result.target_rate = stats.target_rate;
    result.fooling_rate = stats.target_rate.unwrap_or(stats.misclassification_rate);
    result.sparsity = sparsity(&result.mu_x);
    tracing::debug!(
        margin = result.margin,
        fooling_rate = result.fooling_rate,
        iterations = result.iterations,
        "attack finished"
    );
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plnet::AffineMap;

    fn problem() -> AttackProblem {
        let a = AffineMap::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            DVector::from_row_slice(&[0.0, 0.0, -0.5]),
        )
        .unwrap();
        let b = AffineMap::new(
            DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.5, -1.0, 1.0, 0.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let tn = TruncatedNet::from_maps(a, b).unwrap();
        AttackProblem::new(tn, DVector::from_row_slice(&[1.0, 0.2]), 0).unwrap()
    }

    #[test]
    fn deterministic_limit_is_forward_pass() {
        let p = problem();
        let e = expected_logits(&p, &DVector::zeros(2), 1e-30).unwrap();
        let y = p.truncated.forward(&p.image).unwrap();
        assert!((e - y).amax() < 1e-12);
    }

    #[test]
    fn shifting_mean_equals_shifting_image() {
        let mut p = problem();
        let delta = DVector::from_row_slice(&[0.3, -0.4]);
        let e1 = expected_logits(&p, &delta, 0.7).unwrap();
        p.image += &delta;
        let e2 = expected_logits(&p, &DVector::zeros(2), 0.7).unwrap();
        assert!((e1 - e2).amax() < 1e-14);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn verification_of_a_sure_flip() {
        let mut p = problem();
        // Class 1 wins deterministically once x₂ is large.
        let mu = DVector::from_row_slice(&[-1.0, 2.0]);
        p.target_class = Some(1);
        let stats = verify_attack(&p, &mu, 1e-12, 10, 3).unwrap();
        assert_eq!(stats.misclassification_rate, 1.0);
        assert_eq!(stats.target_rate, Some(1.0));
        let stats = verify_attack(&p, &DVector::zeros(2), 1e-12, 10, 3).unwrap();
        assert_eq!(stats.misclassification_rate, 0.0);
        assert!(verify_attack(&p, &mu, 1.0, 0, 3).is_err());
    }

    #[test]
    fn sparsity_counts_small_entries() {
        assert_eq!(sparsity(&[0.0, 1e-4, -0.5, 2.0]), 0.5);
    }
}
