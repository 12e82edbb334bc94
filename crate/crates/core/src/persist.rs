//! Run-trace directories and their manifests.
//!
//! Layout of a persisted run:
//!
//! ```text
//! manifest.json            written last; its presence marks a complete directory
//! trace.json               config, settings, stream keys and summary values
//! reward.json              learned reward model
//! mle_report.json          reward fit diagnostics
//! final_policy.json        uniform mixture (theory mode) or last iterate
//! metrics.csv              t, V_rhat, V_rstar, kl_to_ref, batch_mean_return
//! iterations/iter_0001.json ...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::driver::{DrpoConfig, FinalPolicy, IterationRecord, RunSettings, RunTrace, StreamKeys};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::reward::{MleReport, RewardModel};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub format: u32,
    /// What the directory holds, e.g. `run_trace` or `ablate_beta`.
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Named substream keys derived from the master seed.
    #[serde(default)]
    pub streams: BTreeMap<String, u64>,
    /// Declared inputs, as given, mapped to content hashes.
    #[serde(default)]
    pub input_hashes: BTreeMap<String, String>,
    /// Every output file relative to the directory, mapped to its hash.
    pub files: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
    /// Wall-clock seconds per stage. Informational only.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl ExperimentManifest {
    pub fn new(kind: &str, seed: u64, config: serde_json::Value) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert(env!("CARGO_PKG_NAME").to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            format: FORMAT_VERSION,
            kind: kind.to_string(),
            seed,
            config,
            versions,
            ..Self::default()
        }
    }
}

/// `sha256:<hex>` of a byte string.
pub fn content_hash(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(content_hash(&bytes))
}

/// Recomputes every hash in `hashes` (paths relative to `base`).
pub fn check_hashes(base: &Path, hashes: &BTreeMap<String, String>) -> Result<()> {
    for (rel, expected) in hashes {
        let path = base.join(rel);
        let found = file_hash(&path)?;
        if &found != expected {
            return Err(Error::HashMismatch {
                path,
                expected: expected.clone(),
                found,
            });
        }
    }
    Ok(())
}

/// Removes a stale manifest so an interrupted rewrite is detectable.
pub fn begin_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::File {
        path: dir.to_path_buf(),
        source,
    })?;
    match fs::remove_file(dir.join(MANIFEST_FILE)) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::File {
            path: dir.join(MANIFEST_FILE),
            source: e,
        }),
        _ => Ok(()),
    }
}

/// Hashes `files` (relative to `dir`) into the manifest and writes it.
pub fn commit_manifest(dir: &Path, mut manifest: ExperimentManifest, files: &[String]) -> Result<ExperimentManifest> {
    for rel in files {
        manifest.files.insert(rel.clone(), file_hash(&dir.join(rel))?);
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads the manifest and checks every listed file against its hash.
pub fn open_output_dir(dir: &Path) -> Result<ExperimentManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let manifest: ExperimentManifest = read_json(&path)?;
    check_hashes(dir, &manifest.files)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TraceHeader {
    config: DrpoConfig,
    settings: RunSettings,
    streams: StreamKeys,
    iterations: usize,
    final_v_rhat: f64,
    final_v_rstar: f64,
    v_star: f64,
}

/// The `metrics.csv` body for a trace.
pub fn metrics_csv(trace: &RunTrace) -> String {
    let mut out = String::from("t,V_rhat,V_rstar,kl_to_ref,batch_mean_return\n");
    for r in &trace.iterations {
        let _ = writeln!(out, "{},{},{},{},{}", r.t, r.v_rhat, r.v_rstar, r.kl_to_ref, r.batch.mean_return);
    }
    out
}

fn iteration_file(t: usize) -> String {
    format!("iterations/iter_{t:04}.json")
}

/// Extra manifest content supplied by the caller.
#[derive(Clone, Debug, Default)]
pub struct ManifestExtras {
    pub input_hashes: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

pub fn persist_trace(trace: &RunTrace, dir: &Path, extras: ManifestExtras) -> Result<ExperimentManifest> {
    if trace.iterations.is_empty() {
        return Err(Error::Empty("run trace"));
    }
    begin_output_dir(dir)?;
    let iter_dir = dir.join("iterations");
    if iter_dir.exists() {
        fs::remove_dir_all(&iter_dir).map_err(|source| Error::File { path: iter_dir.clone(), source })?;
    }
    fs::create_dir_all(&iter_dir).map_err(|source| Error::File { path: iter_dir.clone(), source })?;

    let header = TraceHeader {
        config: trace.config.clone(),
        settings: trace.settings.clone(),
        streams: trace.streams.clone(),
        iterations: trace.iterations.len(),
        final_v_rhat: trace.final_v_rhat,
        final_v_rstar: trace.final_v_rstar,
        v_star: trace.v_star,
    };
    let mut files = vec![
        "trace.json".to_string(),
        "reward.json".to_string(),
        "mle_report.json".to_string(),
        "final_policy.json".to_string(),
        METRICS_FILE.to_string(),
    ];
    write_json(&dir.join("trace.json"), &header)?;
    write_json(&dir.join("reward.json"), &trace.reward)?;
    write_json(&dir.join("mle_report.json"), &trace.mle)?;
    write_json(&dir.join("final_policy.json"), &trace.final_policy)?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(trace)).map_err(|source| Error::File {
        path: dir.join(METRICS_FILE),
        source,
    })?;
    for r in &trace.iterations {
        let rel = iteration_file(r.t);
        write_json(&dir.join(&rel), r)?;
        files.push(rel);
    }

    let mut manifest = ExperimentManifest::new("run_trace", trace.config.seed, serde_json::to_value(&trace.config)?);
    manifest.streams.insert("master".into(), trace.streams.master);
    manifest.streams.insert("rollout".into(), trace.streams.rollout);
    manifest.input_hashes = extras.input_hashes;
    manifest.timings = extras.timings;
    manifest.notes = extras.notes;
    if let Some(n0) = trace.settings.chunk_size {
        manifest.notes.push(format!(
            "reset data partitioned into {} chunks of {n0}; {} trajectories discarded",
            trace.iterations.len(),
            trace.settings.discarded
        ));
    } else {
        manifest.notes.push("reset data reused in every iteration".into());
    }
    commit_manifest(dir, manifest, &files)
}

pub fn load_trace(dir: &Path) -> Result<(RunTrace, ExperimentManifest)> {
    let manifest = open_output_dir(dir)?;
    let header: TraceHeader = read_json(&dir.join("trace.json"))?;
    let reward: RewardModel = read_json(&dir.join("reward.json"))?;
    let mle: MleReport = read_json(&dir.join("mle_report.json"))?;
    let final_policy: FinalPolicy = read_json(&dir.join("final_policy.json"))?;
    let mut iterations = Vec::with_capacity(header.iterations);
    for t in 1..=header.iterations {
        let rel = iteration_file(t);
        if !manifest.files.contains_key(&rel) {
            return Err(Error::MissingInput("iteration file listed in the trace header"));
        }
        let record: IterationRecord = read_json(&dir.join(rel))?;
        iterations.push(record);
    }
    let trace = RunTrace {
        config: header.config,
        settings: header.settings,
        streams: header.streams,
        reward,
        mle,
        iterations,
        final_policy,
        final_v_rhat: header.final_v_rhat,
        final_v_rstar: header.final_v_rstar,
        v_star: header.v_star,
    };
    Ok((trace, manifest))
}

/// Paths of every trace directory directly inside `root` (or `root` itself).
pub fn find_trace_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("trace.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|source| Error::File { path: root.to_path_buf(), source })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|source| Error::File { path: root.to_path_buf(), source })?.path();
        if path.join("trace.json").is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
