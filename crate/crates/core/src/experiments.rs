//! Desk-scale experiment drivers shared by the CLI and the test suites:
//! series truncation error on a parameter grid, analytic-vs-sampled moment
//! tightness on random networks, linearization discrepancy under input
//! perturbation, and synthetic images for the attacks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::GaussianSpec;
use crate::net_moments::{mean, variance_general, variance_zero_mean_model};
use crate::oracle::{mc_moments, quad_bivar_relu, rel_diff};
use crate::plnet::{PlNetwork, TruncatedNet};
use crate::relu_moments::{bivar_relu_general, BivariateParams};
use crate::specfun::SeriesConfig;

/// Term counts reported by the series-error study.
pub const SERIES_TERMS: [usize; 5] = [1, 5, 10, 20, 50];

/// `lo, lo + step, …` up to `hi` inclusive, with values rounded to 1e−12 so
/// that grid points like 0.6 come out exact enough to label rows.
pub fn grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Error::Precondition(format!("bad grid {lo}..{hi} step {step}")));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| ((lo + k as f64 * step) * 1e12).round() / 1e12).collect())
}

/// Parameter grid for the series-error study; every combination of
/// `(μ₁, μ₂, σ₁, σ₂)` is evaluated at each `ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeriesGrid {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
}

impl Default for SeriesGrid {
    /// `μ ∈ [−2, 2]` and `σ ∈ [0.2, 2]` in steps of 0.2, `ρ ∈ [−0.7, 0.7]` in
    /// steps of 0.2 together with 0 and 0.999.
    fn default() -> Self {
        let mut rho = grid(-0.7, 0.7, 0.2).expect("static grid");
        rho.extend([0.0, 0.999]);
        rho.sort_by(f64::total_cmp);
        Self {
            mu: grid(-2.0, 2.0, 0.2).expect("static grid"),
            sigma: grid(0.2, 2.0, 0.2).expect("static grid"),
            rho,
        }
    }
}

impl SeriesGrid {
    pub fn points_per_rho(&self) -> usize {
        self.mu.len().pow(2) * self.sigma.len().pow(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesErrorRow {
    pub terms: usize,
    pub rho_bucket: f64,
    pub max_abs_error: f64,
}

/// Largest `|bivar_relu_general − quad_bivar_relu|` over the grid, per term
/// count and per `ρ`. Rows are ordered by `ρ` (grid order), then by `terms`.
pub fn series_error(grid: &SeriesGrid, terms: &[usize]) -> Result<Vec<SeriesErrorRow>> {
    if grid.mu.is_empty() || grid.sigma.is_empty() || grid.rho.is_empty() || terms.is_empty() {
        return Err(Error::Empty("series-error grid"));
    }
    let cfgs = terms.iter().map(|&t| SeriesConfig::new(t)).collect::<Result<Vec<_>>>()?;
    let (nm, ns) = (grid.mu.len(), grid.sigma.len());
    let mut rows = Vec::with_capacity(grid.rho.len() * terms.len());
    for &rho in &grid.rho {
        let worst = (0..grid.points_per_rho())
            .into_par_iter()
            .map(|k| -> Result<Vec<f64>> {
                let (m1, rest) = (k % nm, k / nm);
                let (m2, rest) = (rest % nm, rest / nm);
                let (s1, s2) = (rest % ns, rest / ns);
                let p = BivariateParams::new(grid.mu[m1], grid.mu[m2], grid.sigma[s1], grid.sigma[s2], rho)?;
                let reference = quad_bivar_relu(&p)?;
                cfgs.iter()
                    .map(|&cfg| Ok((bivar_relu_general(&p, cfg)? - reference).abs()))
                    .collect()
            })
            .try_reduce(
                || vec![0.0; cfgs.len()],
                |a, b| Ok(a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect()),
            )?;
        rows.extend(terms.iter().zip(worst).map(|(&t, e)| SeriesErrorRow {
            terms: t,
            rho_bucket: rho,
            max_abs_error: e,
        }));
    }
    Ok(rows)
}

/// Random network and input distribution for the tightness study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TightnessConfig {
    pub instances: usize,
    /// Layer widths, input first. Three widths give an exact
    /// `(Affine, ReLU, Affine)` network; deeper nets are linearized.
    pub widths: Vec<usize>,
    /// ReLU layer to linearize at when `widths` has more than three entries.
    pub linearize_layer: usize,
    pub weight_scale: f64,
    pub bias_scale: f64,
    /// Input mean entries are `N(0, mean_scale²)`; 0 gives `μ_x = 0`.
    pub mean_scale: f64,
    /// Average input variance `trace(Σ)/n`.
    pub input_variance: f64,
    /// Random full covariance instead of `input_variance · I`.
    pub full_covariance: bool,
    /// Zero all biases and the input mean, so the zero-mean formula is exact.
    pub zero_mean: bool,
    pub samples: usize,
    pub terms: usize,
}

impl Default for TightnessConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            widths: vec![6, 10, 3],
            linearize_layer: 0,
            weight_scale: 1.0,
            bias_scale: 0.5,
            mean_scale: 1.0,
            input_variance: 1.0,
            full_covariance: true,
            zero_mean: false,
            samples: 1_000_000,
            terms: 50,
        }
    }
}

/// One random instance: the truncated network, the input law and the seed
/// of its Monte Carlo comparator.
#[derive(Debug, Clone)]
pub struct Instance {
    pub truncated: TruncatedNet,
    pub input: GaussianSpec,
    pub mc_seed: u64,
}

fn normal_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Covariance `L Lᵀ` with Gaussian `L`, rescaled to `trace = variance·n`.
pub fn random_covariance(rng: &mut ChaCha8Rng, n: usize, variance: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &l * l.transpose();
    let trace = cov.trace();
    if trace > 0.0 {
        cov * (variance * n as f64 / trace)
    } else {
        cov
    }
}

/// Instance `index` of the tightness study. Each index draws from its own
/// ChaCha stream, so instances do not depend on how many are generated.
pub fn tightness_instance(cfg: &TightnessConfig, seed: u64, index: u64) -> Result<Instance> {
    if cfg.widths.len() < 3 {
        return Err(Error::Precondition("tightness networks need at least three widths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = cfg.widths[0];
    let bias_scale = if cfg.zero_mean { 0.0 } else { cfg.bias_scale };
    let net = PlNetwork::random(&cfg.widths, cfg.weight_scale, bias_scale, &mut rng)?;
    let mu = if cfg.zero_mean {
        DVector::zeros(n)
    } else {
        normal_vector(&mut rng, n, cfg.mean_scale)
    };
    let input = if cfg.full_covariance {
        GaussianSpec::full(mu.clone(), random_covariance(&mut rng, n, cfg.input_variance))?
    } else {
        GaussianSpec::isotropic(mu.clone(), cfg.input_variance)?
    };
    let truncated = if cfg.widths.len() == 3 {
        TruncatedNet::new(net.layers()[0].clone(), net.layers()[1].clone(), mu, 0)?
    } else {
        net.two_stage_linearize(cfg.linearize_layer, &mu)?
    };
    Ok(Instance {
        truncated,
        input,
        mc_seed: rng.random(),
    })
}

/// Analytic and sampled moments of one logit of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub instance: usize,
    pub logit: usize,
    pub mean: f64,
    pub mean_mc: f64,
    pub mean_se: f64,
    pub var_new: f64,
    /// Variance from the zero-mean model, which ignores `μ_x`, `c₁` and `c₂`.
    pub var_old: f64,
    pub var_mc: f64,
    pub var_se: f64,
    pub er_mean: f64,
    pub er_var_new: f64,
    pub er_var_old: f64,
}

/// Runs `cfg.instances` instances in parallel; rows come back in
/// `(instance, logit)` order.
pub fn tightness(cfg: &TightnessConfig, seed: u64) -> Result<Vec<TightnessRow>> {
    let series = SeriesConfig::new(cfg.terms)?;
    let per_instance = (0..cfg.instances)
        .into_par_iter()
        .map(|i| -> Result<Vec<TightnessRow>> {
            let inst = tightness_instance(cfg, seed, i as u64)?;
            let m = mean(&inst.truncated, &inst.input)?;
            let v = variance_general(&inst.truncated, &inst.input, series)?;
            let v_old = variance_zero_mean_model(&inst.truncated, &inst.input)?;
            let mc = mc_moments(&inst.truncated, &inst.input, cfg.samples, inst.mc_seed)?;
            Ok((0..m.len())
                .map(|k| TightnessRow {
                    instance: i,
                    logit: k,
                    mean: m[k],
                    mean_mc: mc.mean[k],
                    mean_se: mc.mean_se[k],
                    var_new: v.variance[k],
                    var_old: v_old[k],
                    var_mc: mc.variance[k],
                    var_se: mc.variance_se[k],
                    er_mean: rel_diff(m[k], mc.mean[k]),
                    er_var_new: rel_diff(v.variance[k], mc.variance[k]),
                    er_var_old: rel_diff(v_old[k], mc.variance[k]),
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_instance.into_iter().flatten().collect())
}

/// Averages over a set of tightness rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightnessSummary {
    pub rows: usize,
    pub er_mean: f64,
    pub er_var_new: f64,
    pub er_var_old: f64,
    /// Fraction of instances whose average `E_r` of the new variance is at
    /// most that of the zero-mean model.
    pub new_beats_old: f64,
}

pub fn summarize(rows: &[TightnessRow]) -> TightnessSummary {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&TightnessRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mut per_instance: Vec<(usize, f64, f64)> = Vec::new();
    for r in rows {
        match per_instance.last_mut() {
            Some(last) if last.0 == r.instance => {
                last.1 += r.er_var_new;
                last.2 += r.er_var_old;
            }
            _ => per_instance.push((r.instance, r.er_var_new, r.er_var_old)),
        }
    }
    let wins = per_instance.iter().filter(|(_, new, old)| new <= old).count();
    TightnessSummary {
        rows: rows.len(),
        er_mean: avg(|r| r.er_mean),
        er_var_new: avg(|r| r.er_var_new),
        er_var_old: avg(|r| r.er_var_old),
        new_beats_old: wins as f64 / per_instance.len().max(1) as f64,
    }
}

/// Mean `‖net(x + r u) − truncated(x + r u)‖₂` over `directions` Gaussian
/// directions `u` (unit length), one value per radius.
pub fn linearization_discrepancy(
    net: &PlNetwork,
    truncated: &TruncatedNet,
    radii: &[f64],
    directions: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if directions == 0 {
        return Err(Error::Empty("need at least one direction"));
    }
    let x = truncated.source_point();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<DVector<f64>> = (0..directions)
        .map(|_| {
            let u = normal_vector(&mut rng, x.len(), 1.0);
            let norm = u.norm();
            if norm > 0.0 {
                u / norm
            } else {
                u
            }
        })
        .collect();
    radii
        .iter()
        .map(|&r| {
            let mut total = 0.0;
            for u in &dirs {
                let z = x + u * r;
                total += (net.forward(&z)? - truncated.forward(&z)?).norm();
            }
            Ok(total / directions as f64)
        })
        .collect()
}

/// `w × h` image (row-major) holding a Gaussian bump of height `peak`
/// centred at `(cx, cy)`, in pixel coordinates.
pub fn blob_image(w: usize, h: usize, cx: f64, cy: f64, width: f64, peak: f64) -> DVector<f64> {
    DVector::from_fn(w * h, |i, _| {
        let (r, c) = ((i / w) as f64, (i % w) as f64);
        peak * (-((r - cy).powi(2) + (c - cx).powi(2)) / (2.0 * width * width)).exp()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_sizes() {
        let g = SeriesGrid::default();
        assert_eq!(g.mu.len(), 21);
        assert_eq!(g.sigma.len(), 10);
        assert_eq!(g.rho, vec![-0.7, -0.5, -0.3, -0.1, 0.0, 0.1, 0.3, 0.5, 0.7, 0.999]);
        assert_eq!(g.mu[10], 0.0);
        assert_eq!(g.sigma[9], 2.0);
    }

    #[test]
    fn single_point_grid_matches_pointwise_error() {
        let g = SeriesGrid {
            mu: vec![0.4],
            sigma: vec![1.2],
            rho: vec![0.6],
        };
        let rows = series_error(&g, &[50]).unwrap();
        let p = BivariateParams::new(0.4, 0.4, 1.2, 1.2, 0.6).unwrap();
        let direct = (bivar_relu_general(&p, SeriesConfig::new(50).unwrap()).unwrap() - quad_bivar_relu(&p).unwrap()).abs();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].max_abs_error, direct);
    }

    #[test]
    fn instances_do_not_depend_on_count() {
        let cfg = TightnessConfig::default();
        let a = tightness_instance(&cfg, 9, 3).unwrap();
        let b = tightness_instance(&cfg, 9, 3).unwrap();
        assert_eq!(a.truncated, b.truncated);
        assert_eq!(a.mc_seed, b.mc_seed);
        assert_ne!(tightness_instance(&cfg, 9, 4).unwrap().mc_seed, a.mc_seed);
    }

    #[test]
    fn zero_variance_input_gives_exact_agreement() {
        let cfg = TightnessConfig {
            instances: 3,
            input_variance: 0.0,
            full_covariance: false,
            samples: 16,
            ..TightnessConfig::default()
        };
        for r in tightness(&cfg, 1).unwrap() {
            assert!(r.er_mean < 1e-14, "{r:?}");
            assert_eq!(r.er_var_new, 0.0, "{r:?}");
            assert_eq!(r.er_var_old, 0.0, "{r:?}");
        }
    }

    #[test]
    fn blob_peak() {
        let img = blob_image(8, 8, 3.0, 2.0, 1.5, 4.0);
        assert_eq!(img[2 * 8 + 3], 4.0);
        assert!(img.iter().all(|v| *v > 0.0 && *v <= 4.0));
    }
}
