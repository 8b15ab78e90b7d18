use std::path::Path;

use nalgebra::DVector;
use netmoments::attacks::{
    argmax, expected_logits, sparse_smooth_attack, support_attack, targeted_attack, verify_attack, AttackProblem,
    AttackResult, AttackSettings, AttackStatus, FoolingStats,
};
use netmoments::experiments::{
    linearization_discrepancy, series_error, summarize, tightness, SeriesGrid, TightnessConfig, SERIES_TERMS,
};
use netmoments::net_moments::{variance_general, variance_zero_mean_model};
use netmoments::oracle::mc_moments;
use netmoments::plnet::PlNetwork;
use netmoments::specfun::{SeriesConfig, DEFAULT_TERMS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::formats::*;
use crate::{Failure, Global};

/// Hash input: the command, its config after overrides, and any network
/// loaded from disk.
#[derive(Serialize)]
struct Resolved<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    #[serde(skip_serializing_if = "Option::is_none")]
    network: Option<&'a [LayerRecord]>,
}

fn hash_of<C: Serialize>(command: &str, config: &C, network: Option<&[LayerRecord]>) -> Result<String, Failure> {
    config_hash(&Resolved {
        command,
        config,
        network,
    })
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

#[derive(Serialize)]
struct SeriesCsvRow<'a> {
    config_hash: &'a str,
    seed: u64,
    terms: usize,
    rho_bucket: f64,
    max_abs_error: f64,
}

pub fn series_error_cmd(g: &Global) -> Result<(), Failure> {
    let (grid, _): (SeriesGrid, _) = load_config(g.config.as_deref())?;
    let terms: Vec<usize> = match g.terms {
        Some(t) => vec![t],
        None => SERIES_TERMS.to_vec(),
    };
    let seed = g.seed.unwrap_or(0);
    let hash = hash_of("series-error", &(&grid, &terms), None)?;
    let rows = series_error(&grid, &terms)?;
    let path = g.out.join("series_error.csv");
    write_csv(
        &path,
        rows.iter().map(|r| SeriesCsvRow {
            config_hash: &hash,
            seed,
            terms: r.terms,
            rho_bucket: r.rho_bucket,
            max_abs_error: r.max_abs_error,
        }),
    )?;
    report(&path);
    Ok(())
}

#[derive(Serialize)]
struct TightnessCsvRow<'a> {
    config_hash: &'a str,
    seed: u64,
    instance: usize,
    logit: usize,
    mean: f64,
    mean_mc: f64,
    mean_se: f64,
    var_new: f64,
    var_old: f64,
    var_mc: f64,
    var_se: f64,
    er_mean: f64,
    er_var_new: f64,
    er_var_old: f64,
}

#[derive(Serialize)]
struct TightnessSummaryRow<'a> {
    config_hash: &'a str,
    seed: u64,
    rows: usize,
    er_mean: f64,
    er_var_new: f64,
    er_var_old: f64,
    new_beats_old: f64,
}

pub fn tightness_cmd(g: &Global) -> Result<(), Failure> {
    let (mut cfg, _): (TightnessConfig, _) = load_config(g.config.as_deref())?;
    if let Some(t) = g.terms {
        cfg.terms = t;
    }
    let seed = g.seed.unwrap_or(0);
    let hash = hash_of("tightness", &cfg, None)?;
    let rows = tightness(&cfg, seed)?;
    let path = g.out.join("tightness.csv");
    write_csv(
        &path,
        rows.iter().map(|r| TightnessCsvRow {
            config_hash: &hash,
            seed,
            instance: r.instance,
            logit: r.logit,
            mean: r.mean,
            mean_mc: r.mean_mc,
            mean_se: r.mean_se,
            var_new: r.var_new,
            var_old: r.var_old,
            var_mc: r.var_mc,
            var_se: r.var_se,
            er_mean: r.er_mean,
            er_var_new: r.er_var_new,
            er_var_old: r.er_var_old,
        }),
    )?;
    report(&path);
    let s = summarize(&rows);
    let path = g.out.join("tightness_summary.csv");
    write_csv(
        &path,
        [TightnessSummaryRow {
            config_hash: &hash,
            seed,
            rows: s.rows,
            er_mean: s.er_mean,
            er_var_new: s.er_var_new,
            er_var_old: s.er_var_old,
            new_beats_old: s.new_beats_old,
        }],
    )?;
    report(&path);
    Ok(())
}

fn default_directions() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearizeConfig {
    pub network: NetworkSource,
    pub point: Vec<f64>,
    /// ReLU layer the surrogate keeps.
    pub layer: usize,
    /// Perturbation radii for the discrepancy table; empty skips it.
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default = "default_directions")]
    pub directions: usize,
}

#[derive(Serialize)]
struct LinearizeOutput<'a> {
    config_hash: &'a str,
    seed: u64,
    layer: usize,
    input_dim: usize,
    hidden_width: usize,
    output_dim: usize,
    /// Numbers stored by the surrogate.
    storage: usize,
    source_point: &'a [f64],
    output_at_point: Vec<f64>,
    surrogate_at_point: Vec<f64>,
    network: Vec<LayerRecord>,
}

#[derive(Serialize)]
struct DiscrepancyRow<'a> {
    config_hash: &'a str,
    seed: u64,
    radius: f64,
    mean_discrepancy: f64,
}

pub fn linearize_cmd(g: &Global) -> Result<(), Failure> {
    let (cfg, base): (LinearizeConfig, _) = require_config(g.config.as_deref(), "linearize")?;
    let layers = cfg.network.resolve(&base)?;
    let net = network_from_records(&layers)?;
    let seed = g.seed.unwrap_or(0);
    let hash = hash_of("linearize", &cfg, Some(&layers))?;
    let x = DVector::from_column_slice(&cfg.point);
    let tn = net.two_stage_linearize(cfg.layer, &x)?;
    let out = LinearizeOutput {
        config_hash: &hash,
        seed,
        layer: cfg.layer,
        input_dim: tn.input_dim(),
        hidden_width: tn.hidden_width(),
        output_dim: tn.output_dim(),
        storage: tn.storage(),
        source_point: &cfg.point,
        output_at_point: net.forward(&x)?.as_slice().to_vec(),
        surrogate_at_point: tn.forward(&x)?.as_slice().to_vec(),
        network: records_from_network(&tn.to_network()),
    };
    let path = g.out.join("linearization.json");
    write_json(&path, &out)?;
    report(&path);
    if !cfg.radii.is_empty() {
        let d = linearization_discrepancy(&net, &tn, &cfg.radii, cfg.directions, seed)?;
        let path = g.out.join("discrepancy.csv");
        write_csv(
            &path,
            cfg.radii.iter().zip(&d).map(|(&radius, &mean_discrepancy)| DiscrepancyRow {
                config_hash: &hash,
                seed,
                radius,
                mean_discrepancy,
            }),
        )?;
        report(&path);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub network: NetworkSource,
    /// ReLU layer to linearize at (around the input mean) for deeper networks.
    #[serde(default)]
    pub layer: usize,
    pub mean: Vec<f64>,
    pub covariance: CovarianceRecord,
    /// Monte Carlo draws to compare against; 0 skips the comparison.
    #[serde(default)]
    pub mc_samples: usize,
}

#[derive(Serialize)]
struct MomentsRow<'a> {
    config_hash: &'a str,
    seed: u64,
    logit: usize,
    mean: f64,
    variance: f64,
    second_moment: f64,
    variance_clipped: bool,
    variance_zero_mean_model: f64,
    mc_mean: Option<f64>,
    mc_mean_se: Option<f64>,
    mc_variance: Option<f64>,
    mc_variance_se: Option<f64>,
}

pub fn moments_cmd(g: &Global) -> Result<(), Failure> {
    let (cfg, base): (MomentsConfig, _) = require_config(g.config.as_deref(), "moments")?;
    let layers = cfg.network.resolve(&base)?;
    let net = network_from_records(&layers)?;
    let seed = g.seed.unwrap_or(0);
    let terms = g.terms.unwrap_or(DEFAULT_TERMS);
    let hash = hash_of("moments", &(&cfg, terms), Some(&layers))?;
    let input = gaussian(&cfg.mean, &cfg.covariance)?;
    let tn = net.two_stage_linearize(cfg.layer, input.mean())?;
    let m = variance_general(&tn, &input, SeriesConfig::new(terms)?)?;
    let old = variance_zero_mean_model(&tn, &input)?;
    let mc = match cfg.mc_samples {
        0 => None,
        n => Some(mc_moments(&net, &input, n, seed)?),
    };
    if m.fallback_pairs > 0 {
        tracing::info!(pairs = m.fallback_pairs, "hidden pairs evaluated by quadrature");
    }
    let path = g.out.join("moments.csv");
    write_csv(
        &path,
        (0..tn.output_dim()).map(|i| MomentsRow {
            config_hash: &hash,
            seed,
            logit: i,
            mean: m.mean[i],
            variance: m.variance[i],
            second_moment: m.second_moment[i],
            variance_clipped: m.clipped.contains(&i),
            variance_zero_mean_model: old[i],
            mc_mean: mc.as_ref().map(|e| e.mean[i]),
            mc_mean_se: mc.as_ref().map(|e| e.mean_se[i]),
            mc_variance: mc.as_ref().map(|e| e.variance[i]),
            mc_variance_se: mc.as_ref().map(|e| e.variance_se[i]),
        }),
    )?;
    report(&path);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Targeted,
    Support,
    SparseSmooth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub network: NetworkSource,
    pub image: Vec<f64>,
    /// `[w, h]`; required by the sparse-smooth problem.
    #[serde(default)]
    pub shape: Option<[usize; 2]>,
    #[serde(default)]
    pub layer: usize,
    pub problem: AttackKind,
    /// Defaults to the network's prediction on `image`.
    #[serde(default)]
    pub source_class: Option<usize>,
    #[serde(default)]
    pub target_class: Option<usize>,
    #[serde(default)]
    pub support_indices: Option<Vec<usize>>,
    /// Sparse-smooth only: one run per `γ`; empty runs `settings.gamma` alone.
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub settings: AttackSettings,
}

fn build_problem(
    net: &PlNetwork,
    image: &[f64],
    layer: usize,
    source_class: Option<usize>,
) -> Result<AttackProblem, Failure> {
    let x = DVector::from_column_slice(image);
    let source = match source_class {
        Some(c) => c,
        None => argmax(net.forward(&x)?.as_slice()),
    };
    let tn = net.two_stage_linearize(layer, &x)?;
    let mut p = AttackProblem::new(tn, x, source)?;
    p.original = Some(net.clone());
    Ok(p)
}

#[derive(Serialize)]
struct AttackRun {
    gamma: Option<f64>,
    result: AttackResult,
    verification: FoolingStats,
}

#[derive(Serialize)]
struct AttackOutput<'a> {
    config_hash: &'a str,
    seed: u64,
    problem: AttackKind,
    source_class: usize,
    target_class: Option<usize>,
    clean_logits: Vec<f64>,
    runs: Vec<AttackRun>,
}

#[derive(Serialize)]
struct MuRow<'a> {
    config_hash: &'a str,
    seed: u64,
    run: usize,
    index: usize,
    mu_x: f64,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    config_hash: &'a str,
    seed: u64,
    run: usize,
    step: usize,
    phase: usize,
    objective: f64,
}

pub fn attack_cmd(g: &Global) -> Result<(), Failure> {
    let (mut cfg, base): (AttackConfig, _) = require_config(g.config.as_deref(), "attack")?;
    let layers = cfg.network.resolve(&base)?;
    let net = network_from_records(&layers)?;
    if let Some(s) = g.seed {
        cfg.settings.seed = s;
    }
    if let Some(t) = g.terms {
        cfg.settings.series_terms = t;
    }
    let seed = cfg.settings.seed;
    let hash = hash_of("attack", &cfg, Some(&layers))?;

    let mut problem = build_problem(&net, &cfg.image, cfg.layer, cfg.source_class)?;
    problem.shape = cfg.shape.map(|[w, h]| (w, h));
    problem.target_class = cfg.target_class;
    problem.support_indices = cfg.support_indices.clone();
    problem.settings = cfg.settings.clone();

    let gammas: Vec<Option<f64>> = if cfg.problem == AttackKind::SparseSmooth && !cfg.gammas.is_empty() {
        cfg.gammas.iter().map(|&v| Some(v)).collect()
    } else {
        vec![None]
    };
    let runs = gammas
        .par_iter()
        .map(|gamma| {
            let mut p = problem.clone();
            if let Some(v) = gamma {
                p.settings.gamma = *v;
            }
            let result = match cfg.problem {
                AttackKind::Targeted => targeted_attack(&p)?,
                AttackKind::Support => support_attack(&p)?,
                AttackKind::SparseSmooth => sparse_smooth_attack(&p)?,
            };
            let scale = if cfg.problem == AttackKind::SparseSmooth {
                p.settings.mean_scale
            } else {
                1.0
            };
            let noise_mean = DVector::from_column_slice(&result.mu_x) * scale;
            let verification =
                verify_attack(&p, &noise_mean, result.sigma_sq, p.settings.verify_samples.max(1), p.settings.seed)?;
            Ok(AttackRun {
                gamma: *gamma,
                result,
                verification,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;

    let clean = expected_logits(&problem, &DVector::zeros(problem.dim()), netmoments::attacks::MIN_SIGMA_SQ)?;
    let out = AttackOutput {
        config_hash: &hash,
        seed,
        problem: cfg.problem,
        source_class: problem.source_class,
        target_class: problem.target_class,
        clean_logits: clean.as_slice().to_vec(),
        runs,
    };
    let path = g.out.join("attack.json");
    write_json(&path, &out)?;
    report(&path);

    let path = g.out.join("mu_x.csv");
    write_csv(
        &path,
        out.runs.iter().enumerate().flat_map(|(run, r)| {
            let hash = &hash;
            r.result.mu_x.iter().enumerate().map(move |(index, &mu_x)| MuRow {
                config_hash: hash,
                seed,
                run,
                index,
                mu_x,
            })
        }),
    )?;
    report(&path);

    let path = g.out.join("trace.csv");
    write_csv(
        &path,
        out.runs.iter().enumerate().flat_map(|(run, r)| {
            let hash = &hash;
            let starts = &r.result.phase_starts;
            r.result.objective_trace.iter().enumerate().map(move |(step, &objective)| TraceRow {
                config_hash: hash,
                seed,
                run,
                step,
                phase: starts.iter().filter(|&&s| s <= step).count(),
                objective,
            })
        }),
    )?;
    report(&path);

    let failed: Vec<usize> = out
        .runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.result.status == AttackStatus::Failed)
        .map(|(k, _)| k)
        .collect();
    if !failed.is_empty() {
        return Err(Failure::Infeasible(serde_json::json!({
            "error": "infeasible",
            "config_hash": hash,
            "failed_runs": failed,
            "margins": out.runs.iter().map(|r| r.result.margin).collect::<Vec<_>>(),
        })));
    }
    Ok(())
}

fn default_samples() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub network: NetworkSource,
    pub image: Vec<f64>,
    #[serde(default)]
    pub source_class: Option<usize>,
    #[serde(default)]
    pub target_class: Option<usize>,
    /// Mean of the added noise.
    pub mu_x: Vec<f64>,
    pub sigma_sq: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    config_hash: &'a str,
    seed: u64,
    source_class: usize,
    target_class: Option<usize>,
    stats: FoolingStats,
}

pub fn verify_cmd(g: &Global) -> Result<(), Failure> {
    let (cfg, base): (VerifyConfig, _) = require_config(g.config.as_deref(), "verify")?;
    let layers = cfg.network.resolve(&base)?;
    let net = network_from_records(&layers)?;
    let seed = g.seed.unwrap_or(0);
    let hash = hash_of("verify", &cfg, Some(&layers))?;
    if net.depth() < 2 {
        return Err(Failure::Other("verify needs a network with at least one ReLU layer".into()));
    }
    let mut problem = build_problem(&net, &cfg.image, 0, cfg.source_class)?;
    problem.target_class = cfg.target_class;
    let stats = verify_attack(
        &problem,
        &DVector::from_column_slice(&cfg.mu_x),
        cfg.sigma_sq,
        cfg.samples,
        seed,
    )?;
    let path = g.out.join("verify.json");
    write_json(
        &path,
        &VerifyOutput {
            config_hash: &hash,
            seed,
            source_class: problem.source_class,
            target_class: problem.target_class,
            stats,
        },
    )?;
    report(&path);
    Ok(())
}
