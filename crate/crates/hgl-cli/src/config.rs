//! Experiment configuration: a TOML file with `schema = 1`, shared top-level
//! keys and one table per subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hgl_core::fluctuation::{default_bump, FluctuationConfig, KappaConfig, MomentConfig};
use hgl_core::greens::ResidualStudyConfig;
use hgl_core::hs::KernelConfig;
use hgl_core::kernels::{GffStudyConfig, QuadratureParams, TestFunction};
use hgl_core::{Boundary, ConductanceLaw, LatticeGeometry, SolverConfig};

pub const SCHEMA: i64 = 1;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub d: usize,
    pub l: usize,
    pub bc: Boundary,
    /// Overrides the observable pad of the fluctuation experiments.
    pub pad: Option<f64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { d: 3, l: 16, bc: Boundary::Periodic, pad: None }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<LatticeGeometry, ConfigError> {
        LatticeGeometry::new(vec![self.l; self.d], self.bc).map_err(|e| ConfigError(format!("geometry: {e}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleEnvConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for SampleEnvConfig {
    fn default() -> Self {
        SampleEnvConfig { count: 1, seed: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub seed: u64,
    pub lambda: f64,
    /// Source site; the box center (Dirichlet) or the origin (torus) when absent.
    pub source: Option<Vec<i64>>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { seed: 1, lambda: 0.0, source: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorRunConfig {
    pub seed: u64,
    pub n_env: usize,
    pub lambda: f64,
    pub with_sigma: bool,
    pub snapshots: bool,
    /// Self-check threshold for residuals, flux divergence and `sigma` reconstruction.
    pub check_tol: f64,
}

impl Default for CorrectorRunConfig {
    fn default() -> Self {
        CorrectorRunConfig { seed: 1, n_env: 1, lambda: 0.0, with_sigma: true, snapshots: true, check_tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelRunConfig {
    /// Tensor estimation, skipped when `k_report` is given.
    pub kernel: KernelConfig,
    /// `report.json` of an earlier `estimate-k` run.
    pub k_report: Option<PathBuf>,
    /// Overrides the `a_bar` derived from the tensor run.
    pub a_bar: Option<f64>,
    pub f: TestFunction,
    pub g: TestFunction,
    pub quadrature: QuadratureParams,
}

fn small_kernel() -> KernelConfig {
    KernelConfig { l: 16, n_env: 40, ..Default::default() }
}

impl Default for KernelRunConfig {
    fn default() -> Self {
        KernelRunConfig {
            kernel: small_kernel(),
            k_report: None,
            a_bar: None,
            f: default_bump(),
            g: default_bump(),
            quadrature: QuadratureParams::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluctuateConfig {
    pub mc: FluctuationConfig,
    /// Compute `sigma_g^2` and `sigma~_g^2` from a tensor estimate.
    pub with_sigma: bool,
    pub kernel: KernelConfig,
    pub quadrature: QuadratureParams,
    pub with_kappa: bool,
    pub kappa: KappaConfig,
    pub with_moments: bool,
    pub moments: MomentConfig,
}

impl Default for FluctuateConfig {
    fn default() -> Self {
        FluctuateConfig {
            mc: FluctuationConfig::default(),
            with_sigma: true,
            kernel: small_kernel(),
            quadrature: QuadratureParams::default(),
            with_kappa: true,
            kappa: KappaConfig::default(),
            with_moments: true,
            moments: MomentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub max_constant: f64,
    pub sg_samples: usize,
    pub seed: u64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig { max_constant: 100.0, sg_samples: 2000, seed: 17 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: i64,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub law: ConductanceLaw,
    pub geometry: GeometryConfig,
    pub solver: SolverConfig,
    pub sample_env: SampleEnvConfig,
    pub solve: SolveConfig,
    pub corrector: CorrectorRunConfig,
    pub estimate_k: KernelConfig,
    pub kernel: KernelRunConfig,
    pub fluctuate: FluctuateConfig,
    pub bounds: BoundsConfig,
    pub gff: GffStudyConfig,
    pub residual: ResidualStudyConfig,
}

/// Tables whose `seed` follows the top-level seed.
const SEEDED: &[&[&str]] = &[
    &["sample_env"],
    &["solve"],
    &["corrector"],
    &["estimate_k"],
    &["kernel", "kernel"],
    &["fluctuate", "mc"],
    &["fluctuate", "kernel"],
    &["fluctuate", "kappa"],
    &["fluctuate", "moments"],
    &["bounds"],
    &["gff"],
    &["residual"],
];

/// Tables whose `law` follows the top-level law.
const WITH_LAW: &[&[&str]] = &[
    &["estimate_k"],
    &["kernel", "kernel"],
    &["fluctuate", "mc"],
    &["fluctuate", "kernel"],
    &["fluctuate", "kappa"],
    &["fluctuate", "moments"],
    &["residual"],
];

fn table_at<'a>(root: &'a mut toml::Table, path: &[&str]) -> Result<&'a mut toml::Table, ConfigError> {
    let mut t = root;
    for key in path {
        t = t
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("`{key}` must be a table")))?;
    }
    Ok(t)
}

/// Parses the config text, applies a seed override and pushes the
/// top-level `seed` and `law` into every table that uses them.
pub fn parse(text: &str, seed_override: Option<u64>) -> Result<ExperimentConfig, ConfigError> {
    let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError(format!("config: {e}")))?;
    match root.get("schema") {
        Some(toml::Value::Integer(SCHEMA)) => {}
        Some(v) => return Err(ConfigError(format!("unsupported schema {v}"))),
        None => return Err(ConfigError("missing `schema = 1`".into())),
    }
    if let Some(s) = seed_override {
        root.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if let Some(law) = root.get("law").cloned() {
        // accept the snapshot name form, e.g. "tanh(2.0,1.0)"
        let law = match law {
            toml::Value::String(s) => {
                let parsed: ConductanceLaw = s.parse().map_err(|e| ConfigError(format!("law: {e}")))?;
                toml::Value::try_from(parsed).map_err(|e| ConfigError(format!("law: {e}")))?
            }
            other => other,
        };
        root.insert("law".into(), law.clone());
        for path in WITH_LAW {
            table_at(&mut root, path)?.insert("law".into(), law.clone());
        }
    }
    if let Some(seed) = root.get("seed").cloned() {
        for path in SEEDED {
            table_at(&mut root, path)?.insert("seed".into(), seed.clone());
        }
    }
    let cfg: ExperimentConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| ConfigError(format!("config: {e}")))?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, seed_override: Option<u64>) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?,
        None => format!("schema = {SCHEMA}\n"),
    };
    parse(&text, seed_override)
}

impl ExperimentConfig {
    /// The effective configuration as TOML; re-running with it reproduces the run.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
