use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use netmoments::gauss::GaussianSpec;
use netmoments::plnet::{AffineMap, PlNetwork};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

/// One affine layer; `weights` is row-major `rows × cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

/// A network given inline or as a path to a JSON file holding the layer list.
/// Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    Inline(Vec<LayerRecord>),
    Path(PathBuf),
}

impl NetworkSource {
    pub fn resolve(&self, base: &Path) -> Result<Vec<LayerRecord>, Failure> {
        match self {
            NetworkSource::Inline(layers) => Ok(layers.clone()),
            NetworkSource::Path(p) => {
                let path = base.join(p);
                let text = fs::read_to_string(&path)
                    .map_err(|e| Failure::Other(format!("reading network {}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Other(format!("parsing network {}: {e}", path.display())))
            }
        }
    }
}

pub fn network_from_records(layers: &[LayerRecord]) -> Result<PlNetwork, Failure> {
    let mut maps = Vec::with_capacity(layers.len());
    for (k, l) in layers.iter().enumerate() {
        if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
            return Err(Failure::Other(format!(
                "layer {k}: {} weights and {} biases do not fit {}×{}",
                l.weights.len(),
                l.bias.len(),
                l.rows,
                l.cols
            )));
        }
        maps.push(AffineMap::new(
            DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
            DVector::from_column_slice(&l.bias),
        )?);
    }
    Ok(PlNetwork::new(maps, layers.iter().map(|l| l.relu).collect())?)
}

pub fn records_from_network(net: &PlNetwork) -> Vec<LayerRecord> {
    net.layers()
        .iter()
        .zip(net.relu_after())
        .map(|(m, &relu)| {
            let w = m.weights();
            LayerRecord {
                rows: w.nrows(),
                cols: w.ncols(),
                weights: w.transpose().as_slice().to_vec(),
                bias: m.bias().as_slice().to_vec(),
                relu,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceRecord {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    /// Row-major list of rows.
    Full(Vec<Vec<f64>>),
}

pub fn gaussian(mean: &[f64], cov: &CovarianceRecord) -> Result<GaussianSpec, Failure> {
    let mu = DVector::from_column_slice(mean);
    Ok(match cov {
        CovarianceRecord::Isotropic(v) => GaussianSpec::isotropic(mu, *v)?,
        CovarianceRecord::Diagonal(v) => GaussianSpec::diagonal(mu, DVector::from_column_slice(v))?,
        CovarianceRecord::Full(rows) => {
            let n = rows.len();
            if rows.iter().any(|r| r.len() != n) {
                return Err(Failure::Other("full covariance must be square".into()));
            }
            GaussianSpec::full(mu, DMatrix::from_fn(n, n, |i, j| rows[i][j]))?
        }
    })
}

fn parse_config<T: DeserializeOwned>(p: &Path) -> Result<(T, PathBuf), Failure> {
    let text = fs::read_to_string(p).map_err(|e| Failure::Other(format!("reading config {}: {e}", p.display())))?;
    let cfg =
        serde_json::from_str(&text).map_err(|e| Failure::Other(format!("parsing config {}: {e}", p.display())))?;
    let base = p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base))
}

/// Parsed config (defaults when no file is given) and the directory that
/// relative paths inside it refer to.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, PathBuf), Failure> {
    match path {
        None => Ok((T::default(), PathBuf::from("."))),
        Some(p) => parse_config(p),
    }
}

/// Like [`load_config`] for configs that have no sensible default.
pub fn require_config<T: DeserializeOwned>(path: Option<&Path>, command: &str) -> Result<(T, PathBuf), Failure> {
    parse_config(path.ok_or_else(|| Failure::Other(format!("{command} needs --config")))?)
}

/// SHA-256 of the resolved config as compact JSON with sorted keys.
pub fn config_hash<T: Serialize>(resolved: &T) -> Result<String, Failure> {
    // Going through Value sorts object keys, so the hash ignores field order.
    let value = serde_json::to_value(resolved)?;
    let text = serde_json::to_string(&value)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), Failure> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
