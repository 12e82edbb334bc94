//! The dataset-reset training loops and their no-reset baselines.

mod collect;

pub use collect::{collect_online_reset, AnnotatedTrajectory, ResetAction};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{exact_value, max_trajectory_reward, optimal_policy, ActionTable, Mdp, Trajectory};
use crate::mirror_descent::{npg_update, ppo_clip_update, ClipParams, NpgParams, PenalizedCritic};
use crate::policy::{max_state_kl, policy_kl_to_ref, MixturePolicy, TabularPolicy};
use crate::preference::{LinkFunction, PreferencePair};
use crate::regression::{build_regression_set, lsq_finite, lsq_tabular, QEstimate, QProvenance};
use crate::reward::{mle_finite, mle_tabular, MleOptions, MleReport, RewardModel};
use crate::rng::SeedStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Partitioned reset data, mixture reset actions, closed-form update,
    /// uniform-mixture output.
    TheoryNpg,
    /// Reused reset data, clipped surrogate update, last-iterate output.
    PracticalPpo,
    /// Reused reset data, closed-form update, last-iterate output.
    PracticalNpg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardLearning {
    Tabular {
        #[serde(default)]
        options: MleOptions,
    },
    Finite { members: Vec<ActionTable> },
    /// Skip learning and use the environment reward.
    Truth,
}

impl Default for RewardLearning {
    fn default() -> Self {
        RewardLearning::Tabular {
            options: MleOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QClass {
    #[default]
    Tabular,
    Finite { members: Vec<ActionTable> },
}

/// File references resolved by the command-line harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub mdp: String,
    pub sft_policy: String,
    pub preferences: String,
    pub unlabeled: String,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrpoConfig {
    pub mode: Mode,
    pub iterations: usize,
    /// Defaults to `sqrt(1 / (T q_max^2))`, see [`RunSettings::q_max`].
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub clip: ClipParams,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub reward: RewardLearning,
    #[serde(default)]
    pub q_class: QClass,
    #[serde(default = "sigmoid_link")]
    pub link: LinkFunction,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub datasets: Option<DatasetPaths>,
}

fn sigmoid_link() -> LinkFunction {
    LinkFunction::Sigmoid
}

impl DrpoConfig {
    pub fn new(mode: Mode, iterations: usize, seed: u64) -> Self {
        Self {
            mode,
            iterations,
            eta: None,
            lambda: 0.0,
            clip: ClipParams::default(),
            beta: 1.0,
            reward: RewardLearning::default(),
            q_class: QClass::Tabular,
            link: LinkFunction::Sigmoid,
            seed,
            datasets: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!("beta = {} is outside [0, 1]", self.beta)));
        }
        if let Some(eta) = self.eta {
            NpgParams::new(eta, self.lambda)?;
        } else {
            NpgParams::new(1.0, self.lambda)?;
        }
        if self.mode == Mode::PracticalPpo {
            self.clip.validate()?;
        }
        match (&self.reward, &self.q_class) {
            (RewardLearning::Finite { members }, _) if members.is_empty() => Err(Error::Empty("reward class")),
            (_, QClass::Finite { members }) if members.is_empty() => Err(Error::Empty("regression class")),
            _ => Ok(()),
        }
    }

    pub fn npg_params(&self, r_max: f64) -> Result<NpgParams> {
        let eta = match self.eta {
            Some(eta) => eta,
            None if r_max > 0.0 => (1.0 / (self.iterations as f64 * r_max * r_max)).sqrt(),
            None => return Err(Error::InvalidConfig("eta must be given when r_max is 0".into())),
        };
        NpgParams::new(eta, self.lambda)
    }
}

/// Borrowed run inputs, already loaded and validated against each other.
#[derive(Clone, Copy, Debug)]
pub struct RunInputs<'a> {
    pub mdp: &'a Mdp,
    pub pi_sft: &'a TabularPolicy,
    pub preferences: &'a [PreferencePair],
    pub unlabeled: &'a [Trajectory],
}

impl RunInputs<'_> {
    pub fn validate(&self) -> Result<()> {
        self.pi_sft.check_layout(self.mdp.layout())?;
        for t in self.unlabeled {
            t.check(self.mdp)?;
            if !t.is_full(self.mdp.horizon()) {
                return Err(Error::PartialTrajectory {
                    start_step: t.start_step() + 1,
                });
            }
        }
        for p in self.preferences {
            for t in [&p.tau0, &p.tau1] {
                t.check(self.mdp)?;
                if !t.is_full(self.mdp.horizon()) {
                    return Err(Error::PartialTrajectory {
                        start_step: t.start_step() + 1,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub rollouts: usize,
    pub resets: usize,
    pub steps: usize,
    /// Mean learned-reward return of the rollouts.
    pub mean_return: f64,
    pub mean_log_ratio: f64,
}

impl BatchSummary {
    fn of(batch: &[AnnotatedTrajectory]) -> Self {
        let n = batch.len().max(1) as f64;
        let steps: usize = batch.iter().map(|t| t.trajectory.len()).sum();
        Self {
            rollouts: batch.len(),
            resets: batch.iter().filter(|t| t.reset).count(),
            steps,
            mean_return: batch.iter().map(AnnotatedTrajectory::learned_return).sum::<f64>() / n,
            mean_log_ratio: batch.iter().flat_map(|t| t.log_ratios.iter()).sum::<f64>() / steps.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub policy: TabularPolicy,
    pub q_hat: QEstimate,
    pub v_rhat: f64,
    pub v_rstar: f64,
    pub kl_to_ref: f64,
    pub max_state_kl: f64,
    pub batch: BatchSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate_degenerate: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalPolicy {
    Mixture { members: MixturePolicy },
    Last { policy: TabularPolicy },
}

/// Values actually used by a run after defaults and mode rules apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub beta: f64,
    pub r_max: f64,
    /// Upper clip for the critic: the larger of `r_max` and the learned
    /// reward's best trajectory total. Also the scale of the default step.
    pub q_max: f64,
    pub eta: f64,
    pub lambda: f64,
    pub slots_per_iteration: usize,
    /// Trajectories per iteration chunk when the reset data is partitioned.
    pub chunk_size: Option<usize>,
    /// Reset trajectories left over by the partition and never used.
    pub discarded: usize,
    pub reset_action: ResetAction,
    pub reset_step_rule: String,
    pub baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamKeys {
    pub master: u64,
    pub rollout: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: DrpoConfig,
    pub settings: RunSettings,
    pub streams: StreamKeys,
    pub reward: RewardModel,
    pub mle: MleReport,
    pub iterations: Vec<IterationRecord>,
    pub final_policy: FinalPolicy,
    pub final_v_rhat: f64,
    pub final_v_rstar: f64,
    /// Optimal value under the true reward.
    pub v_star: f64,
}

impl RunTrace {
    pub fn suboptimality(&self) -> f64 {
        self.v_star - self.final_v_rstar
    }

    /// First iterate index `t` whose true-reward suboptimality is at most
    /// `eps`; the last iterate of a practical run counts as `T + 1`.
    pub fn iterations_to_reach(&self, eps: f64) -> Option<usize> {
        if let Some(r) = self.iterations.iter().find(|r| self.v_star - r.v_rstar <= eps) {
            return Some(r.t);
        }
        match self.final_policy {
            FinalPolicy::Last { .. } if self.suboptimality() <= eps => Some(self.iterations.len() + 1),
            _ => None,
        }
    }

    /// Every iterate, followed by the last one for practical runs.
    pub fn policies(&self) -> Vec<&TabularPolicy> {
        let mut out: Vec<_> = self.iterations.iter().map(|r| &r.policy).collect();
        if let FinalPolicy::Last { policy } = &self.final_policy {
            out.push(policy);
        }
        out
    }
}

fn learn_reward(inputs: &RunInputs, config: &DrpoConfig) -> Result<(RewardModel, MleReport)> {
    match &config.reward {
        RewardLearning::Tabular { options } => mle_tabular(inputs.mdp, inputs.preferences, &config.link, options),
        RewardLearning::Finite { members } => {
            for m in members {
                m.check_layout(inputs.mdp.layout())?;
            }
            mle_finite(members, inputs.preferences, &config.link)
        }
        RewardLearning::Truth => Ok((
            RewardModel::truth(inputs.mdp),
            MleReport {
                mode: "truth".into(),
                nll: 0.0,
                pairs: inputs.preferences.len(),
                iterations: 0,
                grad_norm: None,
                converged: true,
                class_nll: Vec::new(),
                history: Vec::new(),
                max_total: None,
                exceeds_r_max: false,
                pairwise_error: None,
            },
        )),
    }
}

/// Learns the reward once, then runs `T` rounds of collect, regress, update
/// starting from `pi_sft`.
pub fn run_drpo(inputs: &RunInputs, config: &DrpoConfig) -> Result<RunTrace> {
    let beta = if config.mode == Mode::TheoryNpg { 1.0 } else { config.beta };
    run_loop(inputs, config, beta, false)
}

/// The same loop with every rollout started at the initial state.
pub fn run_baseline_no_reset(inputs: &RunInputs, config: &DrpoConfig) -> Result<RunTrace> {
    run_loop(inputs, config, 0.0, true)
}

fn run_loop(inputs: &RunInputs, config: &DrpoConfig, beta: f64, baseline: bool) -> Result<RunTrace> {
    config.validate()?;
    inputs.validate()?;
    let mdp = inputs.mdp;
    let layout = mdp.layout();
    let r_max = mdp.r_max();
    let pi_sft = inputs.pi_sft;
    let big_t = config.iterations;
    let n = inputs.unlabeled.len();
    if n == 0 {
        return Err(Error::Empty("unlabeled dataset"));
    }
    if let QClass::Finite { members } = &config.q_class {
        for m in members {
            m.check_layout(layout)?;
            if m.values().any(|v| !(0.0..=r_max).contains(&v)) {
                return Err(Error::InvalidConfig("regression class members must lie in [0, r_max]".into()));
            }
        }
    }

    let theory = config.mode == Mode::TheoryNpg;
    let (chunk_size, discarded, slots) = if theory {
        let n0 = n / big_t;
        if n0 == 0 {
            return Err(Error::InvalidConfig(format!(
                "{n} reset trajectories cannot fill {big_t} chunks"
            )));
        }
        (Some(n0), n - n0 * big_t, n0)
    } else {
        (None, 0, n)
    };
    let reset_action = if theory { ResetAction::Mixture } else { ResetAction::Current };

    let (reward, mle) = learn_reward(inputs, config)?;
    let r_hat = &reward.table;
    let q_max = r_max.max(max_trajectory_reward(mdp, r_hat).0);
    let params = config.npg_params(q_max)?;
    let r_star = mdp.true_reward();
    let v_star = exact_value(mdp, &optimal_policy(mdp, r_star), r_star).value();

    let master = SeedStream::new(config.seed);
    let rollout_stream = master.child("rollout");
    let mut pi = pi_sft.clone();
    let mut iterations = Vec::with_capacity(big_t);
    for t in 1..=big_t {
        let step = || -> Result<(IterationRecord, TabularPolicy)> {
            let v_rhat = exact_value(mdp, &pi, r_hat).value();
            let v_rstar = exact_value(mdp, &pi, r_star).value();
            let kl_to_ref = policy_kl_to_ref(mdp, &pi, pi_sft)?;
            let max_kl = max_state_kl(&pi, pi_sft)?;
            let chunk = match chunk_size {
                Some(n0) => &inputs.unlabeled[(t - 1) * n0..t * n0],
                None => inputs.unlabeled,
            };
            let batch = collect_online_reset(
                mdp,
                &pi,
                pi_sft,
                chunk,
                beta,
                reset_action,
                slots,
                r_hat,
                &rollout_stream.index(t as u64),
            )?;
            let (q_hat, next, degenerate) = match config.mode {
                Mode::TheoryNpg | Mode::PracticalNpg => {
                    let trajs: Vec<Trajectory> = batch.iter().map(|b| b.trajectory.clone()).collect();
                    let samples = build_regression_set(&trajs, r_hat);
                    let q_hat = match &config.q_class {
                        QClass::Tabular => lsq_tabular(layout, &samples, q_max),
                        QClass::Finite { members } => lsq_finite(members, &samples)?,
                    };
                    let next = npg_update(&pi, &q_hat.table, pi_sft, &params)?;
                    (q_hat, next, None)
                }
                Mode::PracticalPpo => {
                    let critic = PenalizedCritic::fit(layout, &batch, config.clip.kl_penalty);
                    let out = ppo_clip_update(&pi, &batch, &critic, &config.clip)?;
                    let q_hat = QEstimate {
                        provenance: QProvenance::Penalized,
                        table: critic.q,
                    };
                    (q_hat, out.policy, Some(out.degenerate))
                }
            };
            let record = IterationRecord {
                t,
                policy: pi.clone(),
                q_hat,
                v_rhat,
                v_rstar,
                kl_to_ref,
                max_state_kl: max_kl,
                batch: BatchSummary::of(&batch),
                surrogate_degenerate: degenerate,
            };
            Ok((record, next))
        };
        let (record, next) = step().map_err(|e| e.at_iteration(t))?;
        iterations.push(record);
        pi = next;
    }

    let (final_policy, final_v_rhat, final_v_rstar) = if theory {
        let members = MixturePolicy::new(iterations.iter().map(|r| r.policy.clone()).collect())?;
        let k = iterations.len() as f64;
        let v_rhat = iterations.iter().map(|r| r.v_rhat).sum::<f64>() / k;
        let v_rstar = iterations.iter().map(|r| r.v_rstar).sum::<f64>() / k;
        (FinalPolicy::Mixture { members }, v_rhat, v_rstar)
    } else {
        let v_rhat = exact_value(mdp, &pi, r_hat).value();
        let v_rstar = exact_value(mdp, &pi, r_star).value();
        (FinalPolicy::Last { policy: pi }, v_rhat, v_rstar)
    };

    let mut snapshot = config.clone();
    snapshot.beta = beta;
    Ok(RunTrace {
        config: snapshot,
        settings: RunSettings {
            beta,
            r_max,
            q_max,
            eta: params.eta,
            lambda: params.lambda,
            slots_per_iteration: slots,
            chunk_size,
            discarded,
            reset_action,
            reset_step_rule: "h ~ Unif([H]) within a uniformly chosen reset trajectory".into(),
            baseline,
        },
        streams: StreamKeys {
            master: master.key(),
            rollout: rollout_stream.key(),
        },
        reward,
        mle,
        iterations,
        final_policy,
        final_v_rhat,
        final_v_rstar,
        v_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::families::{chain, reference_policy};
    use crate::preference::{gen_preference_dataset, gen_unlabeled_dataset};

    struct Fixture {
        mdp: Mdp,
        sft: TabularPolicy,
        prefs: Vec<PreferencePair>,
        unlabeled: Vec<Trajectory>,
    }

    impl Fixture {
        fn new(len: usize, weight: f64, m: usize, n: usize, seed: u64) -> Self {
            let mdp = chain(len, 0.0);
            let sft = reference_policy(&mdp, weight);
            let root = SeedStream::new(seed);
            let prefs = gen_preference_dataset(&mdp, &sft, mdp.true_reward(), &LinkFunction::Sigmoid, m, &root.child("prefs")).unwrap();
            let unlabeled = gen_unlabeled_dataset(&mdp, &sft, n, &root.child("unlabeled")).unwrap().trajectories;
            Self { mdp, sft, prefs, unlabeled }
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

    #[test]
    fn single_iteration_theory_run_outputs_reference() {
        let fx = Fixture::new(2, 0.5, 200, 50, 1);
        let mut config = DrpoConfig::new(Mode::TheoryNpg, 1, 3);
        config.lambda = 0.1;
        let trace = run_drpo(&fx.inputs(), &config).unwrap();
        assert_eq!(trace.iterations.len(), 1);
        match &trace.final_policy {
            FinalPolicy::Mixture { members } => assert_eq!(members.members(), std::slice::from_ref(&fx.sft)),
            other => panic!("{other:?}"),
        }
        let v = exact_value(&fx.mdp, &fx.sft, fx.mdp.true_reward()).value();
        assert_eq!(trace.final_v_rstar, v);
        assert_eq!(trace.settings.chunk_size, Some(50));
    }

    #[test]
    fn partition_remainder_is_recorded() {
        let fx = Fixture::new(2, 0.5, 100, 103, 2);
        let mut config = DrpoConfig::new(Mode::TheoryNpg, 10, 3);
        config.lambda = 0.1;
        config.beta = 0.3;
        let trace = run_drpo(&fx.inputs(), &config).unwrap();
        assert_eq!(trace.settings.chunk_size, Some(10));
        assert_eq!(trace.settings.discarded, 3);
        assert_eq!(trace.settings.beta, 1.0);
        assert!(trace.iterations.iter().all(|r| r.batch.resets == 10));
        config.iterations = 200;
        assert!(matches!(run_drpo(&fx.inputs(), &config), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn baseline_matches_beta_zero() {
        let fx = Fixture::new(4, 0.4, 300, 60, 4);
        let mut config = DrpoConfig::new(Mode::PracticalNpg, 5, 9);
        config.eta = Some(1.0);
        config.lambda = 0.05;
        config.beta = 0.0;
        let a = run_drpo(&fx.inputs(), &config).unwrap();
        config.beta = 0.7;
        let b = run_baseline_no_reset(&fx.inputs(), &config).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.final_policy, b.final_policy);
        assert!(b.iterations.iter().all(|r| r.batch.resets == 0));
    }

    #[test]
    fn runs_are_deterministic_and_consistent() {
        let fx = Fixture::new(3, 0.4, 300, 40, 5);
        for mode in [Mode::TheoryNpg, Mode::PracticalNpg, Mode::PracticalPpo] {
            let mut config = DrpoConfig::new(mode, 4, 11);
            config.lambda = 0.2;
            config.beta = 0.5;
            let a = run_drpo(&fx.inputs(), &config).unwrap();
            let b = run_drpo(&fx.inputs(), &config).unwrap();
            assert_eq!(a, b);
            for r in &a.iterations {
                let v = exact_value(&fx.mdp, &r.policy, &a.reward.table).value();
                assert!((v - r.v_rhat).abs() <= 1e-12);
                assert!(r.policy.support_violation(&fx.sft).is_none());
                assert!(r.v_rstar >= -1e-12 && r.v_rstar <= fx.mdp.r_max() + 1e-12);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let fx = Fixture::new(2, 0.5, 10, 10, 6);
        let mut config = DrpoConfig::new(Mode::PracticalNpg, 0, 1);
        assert!(matches!(run_drpo(&fx.inputs(), &config), Err(Error::InvalidConfig(_))));
        config.iterations = 2;
        config.beta = 1.5;
        assert!(matches!(run_drpo(&fx.inputs(), &config), Err(Error::InvalidConfig(_))));
        config.beta = 1.0;
        config.q_class = QClass::Finite { members: vec![] };
        assert!(run_drpo(&fx.inputs(), &config).is_err());
        assert!(Error::Empty("x").at_iteration(2).to_string().starts_with("iteration 2"));
    }

    #[test]
    fn theory_run_on_chain2_converges() {
        let mut wins = 0;
        for seed in 0..10 {
            let fx = Fixture::new(2, 0.8, 2000, 64 * 50, 100 + seed);
            let c_st = 1.0 / (0.9f64 * 0.9);
            let mut config = DrpoConfig::new(Mode::TheoryNpg, 64, seed);
            config.lambda = 0.1 / (3.0 * 2.0 * c_st.ln());
            let trace = run_drpo(&fx.inputs(), &config).unwrap();
            if trace.suboptimality() <= 0.1 {
                wins += 1;
            }
        }
        assert!(wins >= 9, "{wins}/10");
    }
}
