//! Config files for each subcommand. Paths inside a config are resolved
//! against the directory holding the config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use drpo_core::driver::{DatasetPaths, DrpoConfig};
use drpo_core::mdp::families::FamilySpec;
use drpo_core::persist::{check_hashes, file_hash, ExperimentManifest, MANIFEST_FILE};
use drpo_core::preference::LinkFunction;
use drpo_core::reward::MleOptions;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A malformed or inconsistent config. Maps to its own exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// A parsed config plus the directory its relative paths refer to.
pub struct Loaded<T> {
    pub value: T,
    pub raw: serde_json::Value,
    pub base: PathBuf,
}

impl<T> Loaded<T> {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let value = serde_json::from_value(raw.clone()).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { value, raw, base })
}

fn sigmoid() -> LinkFunction {
    LinkFunction::Sigmoid
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenMdpConfig {
    pub mdp: FamilySpec,
    /// Weight on the true optimum in the written reference policy; 0 gives
    /// the uniform policy.
    #[serde(default)]
    pub reference_weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDatasetsConfig {
    pub mdp: String,
    pub sft_policy: String,
    pub pairs: usize,
    pub unlabeled: usize,
    #[serde(default = "sigmoid")]
    pub link: LinkFunction,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRewardConfig {
    pub mdp: String,
    pub preferences: String,
    /// When given, the report includes the exact pairwise error under it.
    #[serde(default)]
    pub sft_policy: Option<String>,
    #[serde(default = "sigmoid")]
    pub link: LinkFunction,
    #[serde(default)]
    pub options: MleOptions,
}

/// A driver config with its dataset paths and the baseline switch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub drpo: DrpoConfig,
    /// Run the no-reset baseline instead of the reset loop.
    #[serde(default)]
    pub baseline: bool,
}

impl RunConfig {
    pub fn datasets(&self) -> Result<&DatasetPaths> {
        self.drpo
            .datasets
            .as_ref()
            .ok_or_else(|| config_error("the run config needs a \"datasets\" block"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mdp: String,
    pub sft_policy: String,
    /// A policy JSON, a final-policy JSON, or a run directory.
    pub policy: String,
    /// Learned reward to report `V_rhat` under. A run directory supplies its own.
    #[serde(default)]
    pub reward: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontierConfig {
    /// Run directories, or directories holding run directories.
    pub traces: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_instances")]
    pub instances: usize,
}

fn default_instances() -> usize {
    100
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { instances: default_instances() }
    }
}

/// Hashes every input and, when a file sits in a directory with a manifest
/// that lists it, checks the hash against that manifest.
pub fn hash_inputs(inputs: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (label, path) in inputs {
        if path.is_file() {
            check_against_manifest(path)?;
            let h = file_hash(path).with_context(|| format!("hashing {label}"))?;
            out.insert(format!("{label}: {}", path.display()), h);
        }
    }
    Ok(out)
}

fn check_against_manifest(path: &Path) -> Result<()> {
    let (Some(dir), Some(name)) = (path.parent(), path.file_name()) else {
        return Ok(());
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() || name == MANIFEST_FILE {
        return Ok(());
    }
    let manifest: ExperimentManifest = drpo_core::io::read_json(&manifest_path)?;
    let name = name.to_string_lossy().to_string();
    if let Some(expected) = manifest.files.get(&name) {
        let single = BTreeMap::from([(name, expected.clone())]);
        check_hashes(dir, &single)?;
    }
    Ok(())
}
