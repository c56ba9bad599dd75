//! Experiment configuration file.

use std::path::{Path, PathBuf};

use fieldlab::coupling::CdfMode;
use fieldlab::fields::{ModelSpec, Noise};
use fieldlab::theory::{DecayKind, MomentParams};
use fieldlab::verify::{Geometry, Tolerances};
use fieldlab::{FieldModel, Innovation, MultiIndex};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "FIELDLAB_OUT";
pub const DEFAULT_OUT: &str = "fieldlab-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentConfig {
    pub p: f64,
    pub lambda: f64,
    #[serde(default = "one")]
    pub d_p: f64,
    #[serde(default = "two")]
    pub c0: f64,
    #[serde(default = "power")]
    pub decay: DecayKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub alpha: u32,
    pub beta: u32,
    #[serde(default = "one")]
    pub tau: f64,
    #[serde(default = "one")]
    pub gamma0: f64,
    /// Number of bisection levels `K`.
    pub depth: u64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn power() -> DecayKind {
    DecayKind::Power
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    /// Moment hypotheses; `delta` is derived from them unless given directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment: Option<MomentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeConfig>,
    /// Claim ids to run; empty runs every verifier the config supports.
    #[serde(default)]
    pub verifiers: Vec<String>,
    /// Cube sides of the moment, variance and simulate ladders.
    #[serde(default = "default_ladder")]
    pub ladder: Vec<i64>,
    /// Cube sides of the CLT ladder.
    #[serde(default = "default_clt_ladder")]
    pub clt_ladder: Vec<i64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_tail_x")]
    pub tail_x: Vec<f64>,
    #[serde(default = "default_lil_depth")]
    pub lil_depth: u32,
    #[serde(default = "one")]
    pub tau: f64,
    /// Site-set pairs for the dependence checks; defaults to a few near pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometries: Option<Vec<Geometry>>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_noise")]
    pub noise: Noise,
    #[serde(default = "default_nu")]
    pub neighbor_nu: Vec<f64>,
    #[serde(default = "default_neighbor_sides")]
    pub neighbor_sides: Vec<i64>,
    #[serde(default = "default_defect_ladder")]
    pub defect_ladder: Vec<i64>,
    /// Depths `K` of the coupling blocks `(K, .., K)` to compare.
    #[serde(default)]
    pub coupling_depths: Vec<u64>,
    #[serde(default = "default_calibration")]
    pub calibration: usize,
    #[serde(default = "default_cdf")]
    pub cdf: CdfMode,
    #[serde(default = "default_ci")]
    pub ci_level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_ladder() -> Vec<i64> {
    vec![16, 64, 256, 1024]
}
fn default_clt_ladder() -> Vec<i64> {
    vec![10, 100, 1000]
}
fn default_replicates() -> usize {
    1000
}
fn default_tail_x() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0]
}
fn default_lil_depth() -> u32 {
    12
}
fn default_trials() -> usize {
    10
}
fn default_noise() -> Noise {
    Noise { innovation: Innovation::Normal, scale: 1.0 }
}
fn default_nu() -> Vec<f64> {
    vec![0.5, 1.0, 2.0]
}
fn default_neighbor_sides() -> Vec<i64> {
    vec![4, 8, 16, 32]
}
fn default_defect_ladder() -> Vec<i64> {
    vec![10, 40, 160, 640]
}
fn default_calibration() -> usize {
    1000
}
fn default_cdf() -> CdfMode {
    CdfMode::Empirical { replicates: 1000 }
}
fn default_ci() -> f64 {
    0.9
}

/// Configuration problems (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn model(&self) -> Result<FieldModel, ConfigError> {
        let spec = self.model.clone().ok_or_else(|| ConfigError("config has no model".into()))?;
        FieldModel::from_spec(spec).map_err(|e| ConfigError(format!("model: {e}")))
    }

    /// `delta` given directly, or chosen from the moment hypotheses for the model dimension.
    pub fn delta(&self, d: usize) -> Result<f64, ConfigError> {
        if let Some(delta) = self.delta {
            if !(delta > 0.0 && delta <= 1.0) {
                return Err(ConfigError(format!("delta = {delta} (need 0 < delta <= 1)")));
            }
            return Ok(delta);
        }
        let m = self.moment.as_ref().ok_or_else(|| ConfigError("need `delta` or `moment`".into()))?;
        let params = MomentParams::new(d, m.p, m.d_p, m.c0, m.lambda, m.decay).map_err(|e| ConfigError(e.to_string()))?;
        fieldlab::theory::choose_delta(&params).map_err(|e| ConfigError(e.to_string()))
    }

    /// Output directory: explicit flag, then config, then the environment, then a default.
    pub fn output(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// Default dependence geometries: single sites at distance 1 and 2, and adjacent pairs.
    pub fn geometries(&self, d: usize) -> Vec<Geometry> {
        if let Some(g) = &self.geometries {
            return g.clone();
        }
        let at = |x: i64| {
            let mut c = vec![0i64; d];
            c[0] = x;
            MultiIndex::from(c)
        };
        vec![
            (vec![at(0)], vec![at(1)]),
            (vec![at(0)], vec![at(2)]),
            (vec![at(0), at(1)], vec![at(2), at(3)]),
        ]
    }
}
