use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use drpo_core::driver::{run_baseline_no_reset, run_drpo, DatasetPaths, FinalPolicy, RunInputs};
use drpo_core::experiment::{ablate_beta, ablation_csv, frontier_csv, frontier_rows, DEFAULT_TARGET};
use drpo_core::io::{read_json, read_jsonl, write_json, write_jsonl};
use drpo_core::mdp::families::reference_policy;
use drpo_core::mdp::{exact_value, optimal_policy};
use drpo_core::persist::{
    begin_output_dir, commit_manifest, file_hash, find_trace_dirs, load_trace, persist_trace, ExperimentManifest,
    ManifestExtras, MANIFEST_FILE,
};
use drpo_core::policy::{max_state_kl, mixture_value, policy_kl_to_ref};
use drpo_core::preference::{gen_preference_dataset, gen_unlabeled_dataset, PreferencePair};
use drpo_core::reward::{mle_tabular, pairwise_error, RewardModel};
use drpo_core::theory::verify::{run_suite, SuiteOptions};
use drpo_core::{ActionTable, Mdp, MixturePolicy, SeedStream, TabularPolicy, Trajectory};
use serde::Serialize;

use crate::config::{
    config_error, hash_inputs, load, EvalConfig, FrontierConfig, GenDatasetsConfig, GenMdpConfig, Loaded, RunConfig,
    TrainRewardConfig, VerifyConfig,
};

/// Raised when a property in `verify` fails.
#[derive(Debug)]
pub struct VerifyFailed(pub usize);

impl fmt::Display for VerifyFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} propert{} failed", self.0, if self.0 == 1 { "y" } else { "ies" })
    }
}

impl std::error::Error for VerifyFailed {}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn seconds(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn finish(dir: &Path, manifest: ExperimentManifest, files: &[&str]) -> Result<()> {
    let files: Vec<String> = files.iter().map(|f| f.to_string()).collect();
    commit_manifest(dir, manifest, &files)?;
    Ok(())
}

pub fn gen_mdp(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let loaded: Loaded<GenMdpConfig> = load(config)?;
    let cfg = &loaded.value;
    if !(0.0..=1.0).contains(&cfg.reference_weight) {
        return Err(config_error("reference_weight must lie in [0, 1]"));
    }
    let seed = seed.unwrap_or(0);
    let mdp = cfg.mdp.try_build(seed)?;
    let sft = reference_policy(&mdp, cfg.reference_weight);
    begin_output_dir(out)?;
    write_json(&out.join("mdp.json"), &mdp)?;
    write_json(&out.join("sft_policy.json"), &sft)?;
    let mut manifest = ExperimentManifest::new("mdp", seed, loaded.raw.clone());
    manifest.notes.push(format!(
        "horizon {}, {} actions, r_max {}",
        mdp.horizon(),
        mdp.num_actions(),
        mdp.r_max()
    ));
    finish(out, manifest, &["mdp.json", "sft_policy.json"])?;
    println!("wrote {}", out.display());
    Ok(())
}

fn read_mdp_and_sft(mdp_path: &Path, sft_path: &Path) -> Result<(Mdp, TabularPolicy)> {
    let mdp: Mdp = read_json(mdp_path)?;
    let sft: TabularPolicy = read_json(sft_path)?;
    sft.check_layout(mdp.layout())
        .map_err(|e| config_error(format!("{} does not fit {}: {e}", sft_path.display(), mdp_path.display())))?;
    Ok((mdp, sft))
}

pub fn gen_datasets(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let loaded: Loaded<GenDatasetsConfig> = load(config)?;
    let cfg = &loaded.value;
    let seed = seed.unwrap_or(cfg.seed);
    let (mdp_path, sft_path) = (loaded.resolve(&cfg.mdp), loaded.resolve(&cfg.sft_policy));
    let input_hashes = hash_inputs(&[("mdp", &mdp_path), ("sft_policy", &sft_path)])?;
    let (mdp, sft) = read_mdp_and_sft(&mdp_path, &sft_path)?;
    if cfg.pairs == 0 || cfg.unlabeled == 0 {
        return Err(config_error("pairs and unlabeled must be positive"));
    }
    let root = SeedStream::new(seed);
    let (prefs_stream, unl_stream) = (root.child("prefs"), root.child("unlabeled"));
    let start = Instant::now();
    let prefs = gen_preference_dataset(&mdp, &sft, mdp.true_reward(), &cfg.link, cfg.pairs, &prefs_stream)?;
    let unlabeled = gen_unlabeled_dataset(&mdp, &sft, cfg.unlabeled, &unl_stream)?;
    begin_output_dir(out)?;
    write_jsonl(&out.join("preferences.jsonl"), &prefs)?;
    write_jsonl(&out.join("unlabeled.jsonl"), &unlabeled.trajectories)?;
    let mut manifest = ExperimentManifest::new("datasets", seed, loaded.raw.clone());
    manifest.streams.insert("prefs".into(), prefs_stream.key());
    manifest.streams.insert("unlabeled".into(), unl_stream.key());
    manifest.input_hashes = input_hashes;
    manifest.timings.insert("generate".into(), seconds(start));
    finish(out, manifest, &["preferences.jsonl", "unlabeled.jsonl"])?;
    println!("wrote {} pairs and {} trajectories to {}", prefs.len(), unlabeled.len(), out.display());
    Ok(())
}

pub fn train_reward(config: &Path, seed: Option<u64>, cap: usize, out: &Path) -> Result<()> {
    let loaded: Loaded<TrainRewardConfig> = load(config)?;
    let cfg = &loaded.value;
    let mdp_path = loaded.resolve(&cfg.mdp);
    let prefs_path = loaded.resolve(&cfg.preferences);
    let sft_path = cfg.sft_policy.as_deref().map(|p| loaded.resolve(p));
    let mut inputs = vec![("mdp", mdp_path.as_path()), ("preferences", prefs_path.as_path())];
    if let Some(p) = &sft_path {
        inputs.push(("sft_policy", p.as_path()));
    }
    let input_hashes = hash_inputs(&inputs)?;
    let mdp: Mdp = read_json(&mdp_path)?;
    let prefs: Vec<PreferencePair> = read_jsonl(&prefs_path)?;
    let start = Instant::now();
    let (model, mut report) = mle_tabular(&mdp, &prefs, &cfg.link, &cfg.options)?;
    let seed = seed.unwrap_or(0);
    let mut notes = Vec::new();
    if let Some(p) = &sft_path {
        let sft: TabularPolicy = read_json(p)?;
        sft.check_layout(mdp.layout())?;
        let stream = SeedStream::new(seed).child("pairwise_error");
        let err = pairwise_error(&mdp, &model.table, mdp.true_reward(), &sft, cap, Some((10_000, &stream)))?;
        notes.push(if err.exact {
            "pairwise error by enumeration".to_string()
        } else {
            format!("pairwise error by Monte-Carlo over {} pairs", err.samples)
        });
        report.pairwise_error = Some(err.value);
    }
    if !report.converged {
        notes.push("reward fit stopped at the iteration limit".into());
    }
    begin_output_dir(out)?;
    write_json(&out.join("reward.json"), &model)?;
    write_json(&out.join("mle_report.json"), &report)?;
    let mut manifest = ExperimentManifest::new("reward", seed, loaded.raw.clone());
    manifest.input_hashes = input_hashes;
    manifest.timings.insert("fit".into(), seconds(start));
    manifest.notes = notes;
    finish(out, manifest, &["reward.json", "mle_report.json"])?;
    println!(
        "mean NLL {:.6} after {} iterations (converged: {})",
        report.nll, report.iterations, report.converged
    );
    Ok(())
}

/// Everything a run reads from disk.
struct RunData {
    mdp: Mdp,
    sft: TabularPolicy,
    prefs: Vec<PreferencePair>,
    unlabeled: Vec<Trajectory>,
    hashes: BTreeMap<String, String>,
}

impl RunData {
    fn load<T>(loaded: &Loaded<T>, paths: &DatasetPaths) -> Result<Self> {
        let mdp_path = loaded.resolve(&paths.mdp);
        let sft_path = loaded.resolve(&paths.sft_policy);
        let prefs_path = loaded.resolve(&paths.preferences);
        let unl_path = loaded.resolve(&paths.unlabeled);
        let hashes = hash_inputs(&[
            ("mdp", &mdp_path),
            ("sft_policy", &sft_path),
            ("preferences", &prefs_path),
            ("unlabeled", &unl_path),
        ])?;
        let (mdp, sft) = read_mdp_and_sft(&mdp_path, &sft_path)?;
        let prefs = read_jsonl(&prefs_path)?;
        let unlabeled = read_jsonl(&unl_path)?;
        Ok(Self { mdp, sft, prefs, unlabeled, hashes })
    }

    fn inputs(&self) -> RunInputs<'_> {
        RunInputs {
            mdp: &self.mdp,
            pi_sft: &self.sft,
            preferences: &self.prefs,
            unlabeled: &self.unlabeled,
        }
    }
}

fn load_run_config(config: &Path, seed: Option<u64>) -> Result<(Loaded<RunConfig>, RunConfig)> {
    let loaded: Loaded<RunConfig> = load(config)?;
    let mut rc = loaded.value.clone();
    if let Some(s) = seed {
        rc.drpo.seed = s;
    }
    rc.drpo.validate()?;
    rc.datasets()?;
    Ok((loaded, rc))
}

pub fn run(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let (loaded, rc) = load_run_config(config, seed)?;
    let data = RunData::load(&loaded, rc.datasets()?)?;
    let start = Instant::now();
    let trace = if rc.baseline {
        run_baseline_no_reset(&data.inputs(), &rc.drpo)?
    } else {
        run_drpo(&data.inputs(), &rc.drpo)?
    };
    let mut extras = ManifestExtras {
        input_hashes: data.hashes.clone(),
        ..ManifestExtras::default()
    };
    extras.timings.insert("run".into(), seconds(start));
    if trace.mle.exceeds_r_max {
        extras.notes.push(format!(
            "learned reward totals reach {}, above r_max; critic clipped at that value",
            trace.settings.q_max
        ));
    }
    persist_trace(&trace, out, extras)?;
    println!(
        "final V_rstar {:.6} (optimum {:.6}), final V_rhat {:.6}; wrote {}",
        trace.final_v_rstar,
        trace.v_star,
        trace.final_v_rhat,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    policy_kind: &'static str,
    members: usize,
    v_rstar: f64,
    v_rhat: Option<f64>,
    v_star: f64,
    suboptimality: f64,
    /// Trajectory KL for a single policy, the member average for a mixture.
    kl_to_ref: f64,
    max_state_kl: f64,
    within_reference_support: bool,
    /// For a run directory: whether the recomputed values equal the recorded ones.
    matches_recorded: Option<bool>,
}

fn parse_policy(path: &Path) -> Result<FinalPolicy> {
    let value: serde_json::Value = read_json(path)?;
    if let Ok(fp) = serde_json::from_value::<FinalPolicy>(value.clone()) {
        return Ok(fp);
    }
    if let Ok(policy) = serde_json::from_value::<TabularPolicy>(value.clone()) {
        return Ok(FinalPolicy::Last { policy });
    }
    let members: MixturePolicy = serde_json::from_value(value)
        .map_err(|e| config_error(format!("{} is not a policy: {e}", path.display())))?;
    Ok(FinalPolicy::Mixture { members })
}

pub fn eval(config: &Path, out: Option<&Path>) -> Result<()> {
    let loaded: Loaded<EvalConfig> = load(config)?;
    let cfg = &loaded.value;
    let mdp_path = loaded.resolve(&cfg.mdp);
    let sft_path = loaded.resolve(&cfg.sft_policy);
    let policy_path = loaded.resolve(&cfg.policy);
    let reward_path = cfg.reward.as_deref().map(|r| loaded.resolve(r));
    let mut inputs = vec![("mdp", mdp_path.as_path()), ("sft_policy", sft_path.as_path())];
    if let Some(r) = &reward_path {
        inputs.push(("reward", r.as_path()));
    }
    if policy_path.is_file() {
        inputs.push(("policy", policy_path.as_path()));
    }
    let mut input_hashes = hash_inputs(&inputs)?;
    let (mdp, sft) = read_mdp_and_sft(&mdp_path, &sft_path)?;

    let mut recorded = None;
    let mut r_hat: Option<ActionTable> = match &reward_path {
        Some(p) => Some(read_json::<RewardModel>(p)?.table),
        None => None,
    };
    let policy = if policy_path.is_dir() {
        let (trace, manifest) = load_trace(&policy_path)?;
        input_hashes.insert(
            format!("run: {}", policy_path.display()),
            file_hash(&policy_path.join(MANIFEST_FILE))?,
        );
        r_hat.get_or_insert(trace.reward.table.clone());
        recorded = Some((trace.final_v_rstar, trace.final_v_rhat, manifest.seed));
        trace.final_policy
    } else {
        parse_policy(&policy_path)?
    };

    let members: Vec<&TabularPolicy> = match &policy {
        FinalPolicy::Last { policy } => vec![policy],
        FinalPolicy::Mixture { members } => members.members().iter().collect(),
    };
    let mut kl_sum = 0.0;
    let mut max_kl = 0.0_f64;
    let mut supported = true;
    for m in &members {
        m.check_layout(mdp.layout())?;
        supported &= m.support_violation(&sft).is_none();
        if supported {
            kl_sum += policy_kl_to_ref(&mdp, m, &sft)?;
            max_kl = max_kl.max(max_state_kl(m, &sft)?);
        }
    }
    let (kl, max_kl) = if supported {
        (kl_sum / members.len() as f64, max_kl)
    } else {
        (f64::INFINITY, f64::INFINITY)
    };
    let value_of = |reward: &ActionTable| match &policy {
        FinalPolicy::Last { policy } => exact_value(&mdp, policy, reward).value(),
        FinalPolicy::Mixture { members } => mixture_value(&mdp, members, reward),
    };
    let r_star = mdp.true_reward();
    let v_rstar = value_of(r_star);
    let v_rhat = r_hat.as_ref().map(|r| value_of(r));
    let v_star = exact_value(&mdp, &optimal_policy(&mdp, r_star), r_star).value();
    let report = EvalReport {
        policy_kind: match &policy {
            FinalPolicy::Last { .. } => "single",
            FinalPolicy::Mixture { .. } => "mixture",
        },
        members: members.len(),
        v_rstar,
        v_rhat,
        v_star,
        suboptimality: v_star - v_rstar,
        kl_to_ref: kl,
        max_state_kl: max_kl,
        within_reference_support: supported,
        matches_recorded: recorded.map(|(vs, vh, _)| vs == v_rstar && Some(vh) == v_rhat),
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = out {
        begin_output_dir(out)?;
        write_text(&out.join("eval.json"), &text)?;
        let seed = recorded.map_or(0, |r| r.2);
        let mut manifest = ExperimentManifest::new("eval", seed, loaded.raw.clone());
        manifest.input_hashes = input_hashes;
        finish(out, manifest, &["eval.json"])?;
    }
    Ok(())
}

fn trace_dirs(loaded: &Loaded<FrontierConfig>) -> Result<Vec<PathBuf>> {
    if loaded.value.traces.is_empty() {
        return Err(config_error("frontier needs at least one trace directory"));
    }
    let mut dirs = Vec::new();
    for t in &loaded.value.traces {
        let found = find_trace_dirs(&loaded.resolve(t))?;
        if found.is_empty() {
            return Err(config_error(format!("no run directories under {t}")));
        }
        dirs.extend(found);
    }
    Ok(dirs)
}

pub fn frontier(config: &Path, out: &Path) -> Result<()> {
    let loaded: Loaded<FrontierConfig> = load(config)?;
    let mut rows = Vec::new();
    let mut input_hashes = BTreeMap::new();
    for dir in trace_dirs(&loaded)? {
        let (trace, _) = load_trace(&dir)?;
        input_hashes.insert(format!("run: {}", dir.display()), file_hash(&dir.join(MANIFEST_FILE))?);
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().to_string());
        rows.extend(frontier_rows(&name, &trace));
    }
    let outside = rows.iter().filter(|r| r.within_bound == Some(false)).count();
    begin_output_dir(out)?;
    write_text(&out.join("frontier.csv"), &frontier_csv(&rows))?;
    let mut manifest = ExperimentManifest::new("frontier", 0, loaded.raw.clone());
    manifest.input_hashes = input_hashes;
    manifest.notes.push(format!("{} rows, {outside} above the drift bound", rows.len()));
    finish(out, manifest, &["frontier.csv"])?;
    println!("{} rows, {outside} above the drift bound; wrote {}", rows.len(), out.display());
    Ok(())
}

pub fn ablate(config: &Path, seed: Option<u64>, betas: &[f64], out: &Path) -> Result<()> {
    let (loaded, rc) = load_run_config(config, seed)?;
    if rc.baseline {
        return Err(config_error("ablate-beta sweeps beta itself; drop \"baseline\""));
    }
    if betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return Err(config_error("every beta must lie in [0, 1]"));
    }
    let data = RunData::load(&loaded, rc.datasets()?)?;
    let start = Instant::now();
    let results = ablate_beta(&data.inputs(), &rc.drpo, betas, DEFAULT_TARGET)?;
    begin_output_dir(out)?;
    let mut rows = Vec::with_capacity(results.len());
    for (row, trace) in &results {
        let sub = out.join(format!("beta_{}", row.beta));
        persist_trace(
            trace,
            &sub,
            ManifestExtras {
                input_hashes: data.hashes.clone(),
                ..ManifestExtras::default()
            },
        )?;
        rows.push(row.clone());
    }
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let mut manifest = ExperimentManifest::new("ablate_beta", rc.drpo.seed, loaded.raw.clone());
    manifest.input_hashes = data.hashes.clone();
    manifest.timings.insert("sweep".into(), seconds(start));
    manifest.notes.push(format!(
        "betas {:?}; iterations_to_target uses suboptimality {DEFAULT_TARGET}; one run directory per beta",
        betas
    ));
    finish(out, manifest, &["ablation.csv"])?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

pub fn verify(config: Option<&Path>, seed: Option<u64>, cap: usize, out: Option<&Path>) -> Result<()> {
    let (cfg, raw) = match config {
        Some(p) => {
            let loaded: Loaded<VerifyConfig> = load(p)?;
            (loaded.value, loaded.raw)
        }
        None => (VerifyConfig::default(), serde_json::json!({})),
    };
    let opts = SuiteOptions {
        seed: seed.unwrap_or(0),
        instances: cfg.instances,
        cap,
    };
    let start = Instant::now();
    let outcomes = run_suite(&opts);
    for o in &outcomes {
        println!(
            "{} {} ({} cases): {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.cases,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if let Some(out) = out {
        begin_output_dir(out)?;
        write_text(&out.join("verify.json"), &serde_json::to_string_pretty(&outcomes)?)?;
        let mut manifest = ExperimentManifest::new("verify", opts.seed, raw);
        manifest.timings.insert("suite".into(), seconds(start));
        finish(out, manifest, &["verify.json"])?;
    }
    if failed > 0 {
        return Err(VerifyFailed(failed).into());
    }
    Ok(())
}
