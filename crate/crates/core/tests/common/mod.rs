#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use netmoments::experiments::random_covariance;
use netmoments::gauss::GaussianSpec;
use netmoments::plnet::{AffineMap, TruncatedNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `B relu(A x + c₁) + c₂` with Gaussian entries; biases scaled by `bias`.
pub fn random_truncated(rng: &mut ChaCha8Rng, n: usize, p: usize, d: usize, bias: f64) -> TruncatedNet {
    let a = AffineMap::new(
        normal_matrix(rng, p, n, 1.0 / (n as f64).sqrt()),
        normal_vector(rng, p, bias),
    )
    .unwrap();
    let b = AffineMap::new(
        normal_matrix(rng, d, p, 1.0 / (p as f64).sqrt()),
        normal_vector(rng, d, bias),
    )
    .unwrap();
    TruncatedNet::from_maps(a, b).unwrap()
}

/// `N(μ, Σ)` with `μ ~ N(0, mean_scale² I)` and a random full `Σ` of unit average variance.
pub fn random_input(rng: &mut ChaCha8Rng, n: usize, mean_scale: f64) -> GaussianSpec {
    let mu = normal_vector(rng, n, mean_scale);
    GaussianSpec::full(mu, random_covariance(rng, n, 1.0)).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Seeded 64→32→16→4 network with an 8×8 blob image centred at a random
/// position, linearized after its first hidden layer.
pub fn attack_fixture(seed: u64, peak: f64) -> netmoments::attacks::AttackProblem {
    use netmoments::attacks::{argmax, AttackProblem};
    use netmoments::experiments::blob_image;
    use netmoments::plnet::PlNetwork;
    let mut r = rng(seed);
    let net = PlNetwork::random(&[64, 32, 16, 4], 2f64.sqrt(), 0.1, &mut r).unwrap();
    let cx = r.random_range(2.0..5.0);
    let cy = r.random_range(2.0..5.0);
    let image = blob_image(8, 8, cx, cy, 3f64.sqrt(), peak);
    let source = argmax(net.forward(&image).unwrap().as_slice());
    let tn = net.two_stage_linearize(1, &image).unwrap();
    let mut p = AttackProblem::new(tn, image, source).unwrap();
    p.original = Some(net);
    p.shape = Some((8, 8));
    p
}
