mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use netmoments::attacks::tv::{tv, tv_gradient};
use netmoments::attacks::*;
use netmoments::experiments::blob_image;
use netmoments::plnet::PlNetwork;

fn targeted_fixture() -> AttackProblem {
    let mut p = attack_fixture(1, 10.0);
    p.settings.beta = 2.5;
    p.target_class = Some((p.source_class + 1) % 4);
    p
}

fn sparse_fixture() -> AttackProblem {
    let mut p = attack_fixture(1, 10.0);
    p.settings.beta = 2.5;
    p
}

fn assert_nonincreasing(trace: &[f64], what: &str) {
    for (k, w) in trace.windows(2).enumerate() {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{what}: step {k} rises {} -> {}", w[0], w[1]);
    }
}

#[test]
fn iterates_stay_inside_the_box() {
    let mut p = targeted_fixture();
    p.settings.sigma_max_sq = 1.5;
    for iters in [1, 2, 3, 5, 10, 40, 200] {
        p.settings.max_iters = iters;
        let r = targeted_attack(&p).unwrap();
        assert!(r.mu_x.iter().all(|m| m.abs() <= p.settings.beta), "iteration {iters}");
        assert!(r.sigma_sq >= MIN_SIGMA_SQ && r.sigma_sq <= 1.5, "iteration {iters}: σ² = {}", r.sigma_sq);
    }
}

#[test]
fn targeted_trace_is_monotone() {
    let r = targeted_attack(&targeted_fixture()).unwrap();
    assert!(r.objective_trace.len() > 1);
    assert_nonincreasing(&r.objective_trace, "targeted");
}

#[test]
fn targeted_attack_flips_the_expected_prediction() {
    let p = targeted_fixture();
    let r = targeted_attack(&p).unwrap();
    assert!(r.success && r.margin > 0.0);
    let logits = expected_logits(&p, &DVector::from_vec(r.mu_x.clone()), r.sigma_sq).unwrap();
    assert_eq!(argmax(logits.as_slice()), p.target_class.unwrap());
    assert!(r.fooling_rate >= 0.9, "fooling rate {}", r.fooling_rate);
    assert_eq!(r.target_rate, Some(r.fooling_rate));
}

#[test]
fn zero_box_only_moves_the_variance() {
    let mut p = targeted_fixture();
    p.settings.beta = 0.0;
    p.settings.sigma_sq_init = 0.5;
    let r = targeted_attack(&p).unwrap();
    assert!(r.mu_x.iter().all(|m| *m == 0.0));
    assert_ne!(r.sigma_sq, 0.5);
}

#[test]
fn already_fooled_start_returns_immediately() {
    let mut p = targeted_fixture();
    let logits = expected_logits(&p, &DVector::zeros(64), p.settings.sigma_sq_init).unwrap();
    let winner = argmax(logits.as_slice());
    p.target_class = Some(winner);
    p.source_class = (winner + 1) % 4;
    let r = targeted_attack(&p).unwrap();
    assert_eq!(r.status, AttackStatus::AlreadyFooled);
    assert_eq!(r.iterations, 0);
    assert!(r.margin > 0.0);
    assert!(r.mu_x.iter().all(|m| *m == 0.0));
}

#[test]
fn targeted_objective_gradient_matches_finite_differences() {
    let p = targeted_fixture();
    let j = p.target_class.unwrap();
    let mut r = rng(90);
    for _ in 0..10 {
        let mu = normal_vector(&mut r, 64, 0.5);
        let s = uniform(&mut r, 0.2, 2.0);
        let (_, g_mu, g_s) = targeted_objective(&p, j, &mu, s).unwrap();
        let h = 1e-6;
        for k in (0..64).step_by(7) {
            let mut up = mu.clone();
            let mut down = mu.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (targeted_objective(&p, j, &up, s).unwrap().0 - targeted_objective(&p, j, &down, s).unwrap().0) / (2.0 * h);
            assert!((fd - g_mu[k]).abs() <= 1e-5, "coordinate {k}: {fd} vs {}", g_mu[k]);
        }
        let hs = 1e-6 * s;
        let fd = (targeted_objective(&p, j, &mu, s + hs).unwrap().0 - targeted_objective(&p, j, &mu, s - hs).unwrap().0) / (2.0 * hs);
        assert!((fd - g_s).abs() <= 1e-5, "σ²: {fd} vs {g_s}");
    }
}

#[test]
fn support_attack_never_touches_other_pixels() {
    let mut p = sparse_fixture();
    p.settings.alpha = 0.25;
    p.settings.seed = 5;
    let support = support_for(&p).unwrap();
    assert_eq!(support.len(), 16);
    for iters in [1, 2, 5, 20, 2000] {
        p.settings.max_iters = iters;
        let r = support_attack(&p).unwrap();
        for (k, m) in r.mu_x.iter().enumerate() {
            if support.binary_search(&k).is_err() {
                assert_eq!(m.to_bits(), 0.0f64.to_bits(), "pixel {k} after {iters} iterations");
            }
        }
        assert_nonincreasing(&r.objective_trace, "support");
    }
}

#[test]
fn support_draw_is_seeded() {
    let mut p = sparse_fixture();
    p.settings.alpha = 0.1;
    p.settings.seed = 3;
    let a = support_for(&p).unwrap();
    assert_eq!(a, support_for(&p).unwrap());
    assert_eq!(a.len(), 7);
    p.settings.seed = 4;
    assert_ne!(a, support_for(&p).unwrap());
}

#[test]
fn full_support_equals_untargeted_attack() {
    let mut p = sparse_fixture();
    p.settings.alpha = 1.0;
    let full = support_attack(&p).unwrap();
    p.support_indices = Some((0..64).collect());
    let explicit = support_attack(&p).unwrap();
    assert_eq!(full, explicit);
}

#[test]
fn empty_support_optimizes_only_the_variance() {
    let mut p = sparse_fixture();
    p.support_indices = Some(vec![]);
    let r = support_attack(&p).unwrap();
    assert!(r.mu_x.iter().all(|m| *m == 0.0));
}

#[test]
fn support_attack_on_a_large_digit_like_input() {
    let mut r = rng(1);
    let net = PlNetwork::random(&[784, 64, 32, 10], 2f64.sqrt(), 0.1, &mut r).unwrap();
    // Two overlapping strokes on a 28×28 canvas.
    let image = blob_image(28, 28, 10.0, 14.0, 3.0, 8.0) + blob_image(28, 28, 17.0, 12.0, 2.5, 8.0);
    let source = argmax(net.forward(&image).unwrap().as_slice());
    let tn = net.two_stage_linearize(1, &image).unwrap();
    let mut p = AttackProblem::new(tn, image, source).unwrap();
    p.original = Some(net);
    p.settings.alpha = 0.04;
    p.settings.beta = 8.0;
    p.settings.seed = 96;
    let support = support_for(&p).unwrap();
    assert_eq!(support.len(), 32);
    let res = support_attack(&p).unwrap();
    for (k, m) in res.mu_x.iter().enumerate() {
        if support.binary_search(&k).is_err() {
            assert_eq!(*m, 0.0);
        }
    }
    assert_ne!(res.status, AttackStatus::AlreadyFooled);
    assert!(res.success, "margin {}", res.margin);
    assert!(res.fooling_rate >= 0.9, "fooling rate {}", res.fooling_rate);
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    let mut p = sparse_fixture();
    p.settings.gamma = 1.0;
    let mut r = rng(91);
    for trial in 0..10 {
        let mu = normal_vector(&mut r, 64, 0.3);
        let penalty = SmoothPenalty::at(&p, &mu, 10.0 * (trial + 1) as f64).unwrap();
        let (_, grad) = penalty.value_and_gradient(&p, &mu).unwrap();
        let h = 1e-6;
        for k in (0..64).step_by(5) {
            let mut up = mu.clone();
            let mut down = mu.clone();
            up[k] += h;
            down[k] -= h;
            let fd = (penalty.value_and_gradient(&p, &up).unwrap().0 - penalty.value_and_gradient(&p, &down).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5, "trial {trial} pixel {k}: {fd} vs {}", grad[k]);
        }
    }
}

#[test]
fn sparse_attack_is_feasible_sparse_and_fools() {
    let p = sparse_fixture();
    let r = sparse_smooth_attack(&p).unwrap();
    assert!(r.success, "margin {}", r.margin);
    assert!(r.sparsity >= 0.5, "sparsity {}", r.sparsity);
    assert!(r.fooling_rate >= 0.9, "fooling rate {}", r.fooling_rate);
    assert!(r.mu_x.iter().all(|m| m.abs() <= p.settings.beta));
    assert_eq!(r.sigma_sq, 1.0);
    for w in r.phase_starts.windows(2) {
        assert_nonincreasing(&r.objective_trace[w[0]..w[1]], "sparse phase");
    }
    let last = *r.phase_starts.last().unwrap();
    assert_nonincreasing(&r.objective_trace[last..], "sparse final phase");
}

#[test]
fn larger_gamma_gives_larger_margin() {
    let mut p = sparse_fixture();
    let mut margins = Vec::new();
    for gamma in [0.0, 0.5, 1.0, 2.0] {
        p.settings.gamma = gamma;
        let r = sparse_smooth_attack(&p).unwrap();
        assert!(r.margin >= gamma, "γ = {gamma}: margin {}", r.margin);
        margins.push(r.margin);
    }
    for w in margins.windows(2) {
        assert!(w[1] >= w[0], "{margins:?}");
    }
}

#[test]
fn vacuous_constraint_returns_zero_noise() {
    let mut p = sparse_fixture();
    p.settings.gamma = -1e6;
    let r = sparse_smooth_attack(&p).unwrap();
    assert!(r.mu_x.iter().all(|m| *m == 0.0));
    assert_eq!(r.objective_trace.last().copied(), Some(0.0));
}

#[test]
fn sparse_solution_beats_a_constant_shift() {
    let mut p = sparse_fixture();
    p.settings.confidence_z = 0.0;
    let n = p.dim();
    // Smallest constant shift (on a 0.01 grid) that already flips the expectation.
    let shift = (1..=250)
        .flat_map(|k| [0.01 * k as f64, -0.01 * k as f64])
        .find(|&c| {
            let logits = expected_logits(&p, &DVector::from_element(n, c), 1.0).unwrap();
            achieved_margin(&p, &logits) >= 0.0
        })
        .expect("some constant shift inside the box fools the network");
    let r = sparse_smooth_attack(&p).unwrap();
    let mu = DVector::from_vec(r.mu_x.clone());
    let objective = mu.iter().map(|v| v.abs()).sum::<f64>() + tv(&mu, 8, 8, p.settings.tv_epsilon).unwrap();
    assert!(objective <= n as f64 * shift.abs(), "{objective} vs constant {}", n as f64 * shift.abs());
}

#[test]
fn sparse_attack_on_a_larger_image() {
    let mut r = rng(97);
    let net = PlNetwork::random(&[256, 48, 24, 4], 2f64.sqrt(), 0.1, &mut r).unwrap();
    let image = blob_image(16, 16, 7.0, 8.0, 3.0, 10.0);
    let source = argmax(net.forward(&image).unwrap().as_slice());
    let tn = net.two_stage_linearize(1, &image).unwrap();
    let mut p = AttackProblem::new(tn, image, source).unwrap();
    p.original = Some(net);
    p.shape = Some((16, 16));
    p.settings.beta = 2.5;
    let res = sparse_smooth_attack(&p).unwrap();
    assert!(res.success, "margin {}", res.margin);
    assert!(res.sparsity >= 0.5, "sparsity {}", res.sparsity);
    assert!(res.fooling_rate >= 0.9, "fooling rate {}", res.fooling_rate);
}

#[test]
fn attacks_are_deterministic() {
    let p = targeted_fixture();
    assert_eq!(targeted_attack(&p).unwrap(), targeted_attack(&p).unwrap());
    let p = sparse_fixture();
    assert_eq!(sparse_smooth_attack(&p).unwrap(), sparse_smooth_attack(&p).unwrap());
}

#[test]
fn tv_matches_difference_operator_matrices() {
    let (w, h) = (5, 4);
    let n = w * h;
    let mut dx = DMatrix::zeros(n, n);
    let mut dy = DMatrix::zeros(n, n);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                dx[(i, i + 1)] = 1.0;
                dx[(i, i)] = -1.0;
            }
            if r + 1 < h {
                dy[(i, i + w)] = 1.0;
                dy[(i, i)] = -1.0;
            }
        }
    }
    let mut rg = rng(92);
    for _ in 0..10 {
        let mu = normal_vector(&mut rg, n, 1.0);
        let (gx, gy) = (&dx * &mu, &dy * &mu);
        let dense: f64 = (0..n).map(|i| (gx[i] * gx[i] + gy[i] * gy[i]).sqrt()).sum();
        assert!((tv(&mu, w, h, 0.0).unwrap() - dense).abs() <= 1e-10);
        let eps = 0.1;
        let smooth: f64 = (0..n).map(|i| (gx[i] * gx[i] + gy[i] * gy[i] + eps * eps).sqrt() - eps).sum();
        assert!((tv(&mu, w, h, eps).unwrap() - smooth).abs() <= 1e-10);
        assert_eq!(tv_gradient(&mu, w, h, eps).unwrap().len(), n);
    }
}

#[test]
fn verification_counts_flips_exactly() {
    let p = targeted_fixture();
    let r = targeted_attack(&p).unwrap();
    let stats = verify_attack(&p, &DVector::from_vec(r.mu_x.clone()), r.sigma_sq, 10, 4).unwrap();
    let scaled = stats.misclassification_rate * 10.0;
    assert_eq!(scaled, scaled.round());
    // No noise on a clean image leaves the prediction alone.
    let clean = verify_attack(&p, &DVector::zeros(64), 1e-12, 100, 4).unwrap();
    assert_eq!(clean.misclassification_rate, 0.0);
}

#[test]
fn rejects_bad_problems() {
    let mut p = targeted_fixture();
    p.target_class = Some(p.source_class);
    assert!(targeted_attack(&p).is_err());
    p.target_class = None;
    assert!(targeted_attack(&p).is_err());
    let mut p = sparse_fixture();
    p.shape = None;
    assert!(sparse_smooth_attack(&p).is_err());
    let mut p = sparse_fixture();
    p.settings.alpha = 0.0;
    assert!(support_attack(&p).is_err());
    let mut p = sparse_fixture();
    p.support_indices = Some(vec![3, 3]);
    assert!(support_attack(&p).is_err());
}
