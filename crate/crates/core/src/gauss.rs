//! Gaussian input specifications, affine pushforward and reproducible sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::plnet::AffineMap;

/// Rows generated per RNG stream. Row `r` always comes from stream `r / SAMPLE_BLOCK`,
/// so output does not depend on how blocks are scheduled across threads.
pub const SAMPLE_BLOCK: usize = 4096;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// Covariance of a [`GaussianSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    /// `σ² I`
    Isotropic(f64),
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

/// `N(mean, covariance)` on `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    mean: DVector<f64>,
    covariance: Covariance,
}

impl GaussianSpec {
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        check_finite_mean(&mean)?;
        if !(variance >= 0.0) || !variance.is_finite() {
            return Err(Error::domain("GaussianSpec", format!("variance {variance} must be >= 0")));
        }
        Ok(Self {
            mean,
            covariance: Covariance::Isotropic(variance),
        })
    }

    pub fn diagonal(mean: DVector<f64>, variances: DVector<f64>) -> Result<Self> {
        check_finite_mean(&mean)?;
        if variances.len() != mean.len() {
            return Err(Error::dims("GaussianSpec diagonal", mean.len(), variances.len()));
        }
        if let Some(v) = variances.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::domain("GaussianSpec", format!("variance {v} must be >= 0")));
        }
        Ok(Self {
            mean,
            covariance: Covariance::Diagonal(variances),
        })
    }

    /// Full covariance. Must be symmetric to 1e−12 (relative to its largest
    /// entry); eigenvalues down to `−1e−10·trace/n` are clipped to zero.
    pub fn full(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        check_finite_mean(&mean)?;
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::dims("GaussianSpec full", n, covariance.nrows()));
        }
        let scale = covariance.amax().max(1.0);
        let asymmetry = (&covariance - covariance.transpose()).amax();
        if !(asymmetry <= SYMMETRY_TOL * scale) {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let sym = symmetrize(covariance);
        Ok(Self {
            mean,
            covariance: Covariance::Full(clip_psd(sym)?),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.covariance
    }

    /// Same covariance, different mean.
    pub fn with_mean(&self, mean: DVector<f64>) -> Result<Self> {
        if mean.len() != self.dim() {
            return Err(Error::dims("GaussianSpec::with_mean", self.dim(), mean.len()));
        }
        check_finite_mean(&mean)?;
        Ok(Self {
            mean,
            covariance: self.covariance.clone(),
        })
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        match &self.covariance {
            Covariance::Isotropic(v) => DMatrix::identity(n, n) * *v,
            Covariance::Diagonal(d) => DMatrix::from_diagonal(d),
            Covariance::Full(m) => m.clone(),
        }
    }

    pub fn variances(&self) -> DVector<f64> {
        match &self.covariance {
            Covariance::Isotropic(v) => DVector::from_element(self.dim(), *v),
            Covariance::Diagonal(d) => d.clone(),
            Covariance::Full(m) => m.diagonal(),
        }
    }

    /// True when every variance is zero.
    pub fn is_degenerate(&self) -> bool {
        self.variances().iter().all(|v| *v == 0.0)
    }

    /// Factorizes the covariance once for repeated sampling.
    pub fn sampler(&self) -> Result<Sampler> {
        let factor = match &self.covariance {
            Covariance::Isotropic(v) => Factor::Scale(DVector::from_element(self.dim(), v.sqrt())),
            Covariance::Diagonal(d) => Factor::Scale(d.map(f64::sqrt)),
            Covariance::Full(m) => Factor::Dense(dense_factor(m)?),
        };
        Ok(Sampler {
            mean: self.mean.clone(),
            factor,
        })
    }
}

fn check_finite_mean(mean: &DVector<f64>) -> Result<()> {
    if mean.iter().all(|m| m.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain("GaussianSpec", "mean has non-finite entries"))
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn clip_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(m);
    }
    let threshold = -PSD_TOL * m.trace().abs() / n as f64;
    let eig = SymmetricEigen::new(m.clone());
    let min_eigenvalue = eig.eigenvalues.min();
    if !min_eigenvalue.is_finite() {
        return Err(Error::NonConvergence {
            routine: "symmetric eigendecomposition",
            iterations: 0,
        });
    }
    if min_eigenvalue < threshold {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue,
            threshold,
        });
    }
    if min_eigenvalue >= 0.0 {
        return Ok(m);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    Ok(symmetrize(v * DMatrix::from_diagonal(&clipped) * v.transpose()))
}

/// Eigenvalues below this fraction of the largest are rounding noise.
const RANK_TOL: f64 = 1e-13;

/// `L` with `L Lᵀ = Σ`: Cholesky for well-conditioned `Σ`, otherwise `V √Λ`
/// from an eigendecomposition with rounding-level eigenvalues set to 0, so
/// draws from a singular `Σ` stay on its range.
fn dense_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = m.diagonal().amax();
    if let Some(ch) = m.clone().cholesky() {
        let l = ch.l();
        if l.diagonal().iter().all(|d| d * d > RANK_TOL * scale) {
            return Ok(l);
        }
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonConvergence {
            routine: "covariance factorization",
            iterations: 0,
        });
    }
    let top = eig.eigenvalues.amax();
    let roots = eig.eigenvalues.map(|l| if l > RANK_TOL * top { l.sqrt() } else { 0.0 });
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

#[derive(Debug, Clone)]
enum Factor {
    Scale(DVector<f64>),
    Dense(DMatrix<f64>),
}

/// Draws rows of `N(mean, Σ)` from counter-addressed ChaCha streams.
#[derive(Debug, Clone)]
pub struct Sampler {
    mean: DVector<f64>,
    factor: Factor,
}

impl Sampler {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Rows `[block·SAMPLE_BLOCK, block·SAMPLE_BLOCK + rows)` of the sample
    /// sequence for `seed`, as a `rows × n` matrix.
    pub fn block(&self, seed: u64, block: usize, rows: usize) -> DMatrix<f64> {
        debug_assert!(rows <= SAMPLE_BLOCK);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(block as u64);
        let n = self.dim();
        let mut out = DMatrix::zeros(rows, n);
        let mut z = DVector::zeros(n);
        for r in 0..rows {
            for v in z.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            out.row_mut(r).copy_from(&self.transform(&z).transpose());
        }
        out
    }

    fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        match &self.factor {
            Factor::Scale(s) => &self.mean + z.component_mul(s),
            Factor::Dense(l) => &self.mean + l * z,
        }
    }
}

/// `count` i.i.d. draws as the rows of a `count × n` matrix. Identical seeds
/// give bit-identical output regardless of the thread pool size.
pub fn sample(spec: &GaussianSpec, count: usize, seed: u64) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(Error::Empty("sample count must be positive"));
    }
    let sampler = spec.sampler()?;
    let n = spec.dim();
    let blocks = count.div_ceil(SAMPLE_BLOCK);
    let blocks: Vec<DMatrix<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = SAMPLE_BLOCK.min(count - b * SAMPLE_BLOCK);
            sampler.block(seed, b, len)
        })
        .collect();
    let mut out = DMatrix::zeros(count, n);
    for (b, block) in blocks.iter().enumerate() {
        out.rows_mut(b * SAMPLE_BLOCK, block.nrows()).copy_from(block);
    }
    Ok(out)
}

/// Moments of `A x + c` for `x ~ N(μ, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PushforwardGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl PushforwardGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self, v: usize) -> f64 {
        self.cov[(v, v)].max(0.0).sqrt()
    }

    /// `Σ̄_ij / (σ̄_i σ̄_j)`, or 0 when either variance vanishes. Not clamped.
    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        let denom = self.std(i) * self.std(j);
        if denom > 0.0 {
            self.cov[(i, j)] / denom
        } else {
            0.0
        }
    }
}

/// Pushes `spec` through `map`: mean `Aμ + c`, covariance `AΣAᵀ` (symmetrized).
pub fn pushforward(spec: &GaussianSpec, map: &AffineMap) -> Result<PushforwardGaussian> {
    let a = map.weights();
    if a.ncols() != spec.dim() {
        return Err(Error::dims("pushforward", a.ncols(), spec.dim()));
    }
    let mean = a * spec.mean() + map.bias();
    let cov = match spec.covariance() {
        Covariance::Isotropic(v) => a * a.transpose() * *v,
        Covariance::Diagonal(d) => {
            let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[j]);
            scaled * a.transpose()
        }
        Covariance::Full(s) => a * s * a.transpose(),
    };
    Ok(PushforwardGaussian {
        mean,
        cov: symmetrize(cov),
    })
}
