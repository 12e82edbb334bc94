//! Sweeps built on the driver: the reset-proportion ablation and the
//! reward-versus-KL frontier.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::driver::{run_drpo, DrpoConfig, FinalPolicy, Mode, RunInputs, RunTrace};
use crate::error::{Error, Result};
use crate::mirror_descent::kl_drift_bound;
use crate::policy::policy_kl_to_ref;

/// Suboptimality target used for the iterations-to-target column.
pub const DEFAULT_TARGET: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub beta: f64,
    /// Fraction of all rollouts that started from a dataset reset.
    pub reset_fraction: f64,
    pub final_v_rhat: f64,
    pub final_v_rstar: f64,
    pub suboptimality: f64,
    pub final_kl_to_ref: f64,
    /// First iterate within the target suboptimality, if any.
    pub iterations_to_target: Option<usize>,
}

impl AblationRow {
    pub fn of(inputs: &RunInputs, trace: &RunTrace, target: f64) -> Result<Self> {
        let rollouts: usize = trace.iterations.iter().map(|r| r.batch.rollouts).sum();
        let resets: usize = trace.iterations.iter().map(|r| r.batch.resets).sum();
        let final_kl_to_ref = match &trace.final_policy {
            FinalPolicy::Last { policy } => policy_kl_to_ref(inputs.mdp, policy, inputs.pi_sft)?,
            FinalPolicy::Mixture { members } => {
                let ms = members.members();
                let mut total = 0.0;
                for m in ms {
                    total += policy_kl_to_ref(inputs.mdp, m, inputs.pi_sft)?;
                }
                total / ms.len() as f64
            }
        };
        Ok(Self {
            beta: trace.settings.beta,
            reset_fraction: resets as f64 / rollouts.max(1) as f64,
            final_v_rhat: trace.final_v_rhat,
            final_v_rstar: trace.final_v_rstar,
            suboptimality: trace.suboptimality(),
            final_kl_to_ref,
            iterations_to_target: trace.iterations_to_reach(target),
        })
    }
}

/// One run per `beta`, same seed and data. Theory mode fixes `beta = 1` and
/// is rejected.
pub fn ablate_beta(inputs: &RunInputs, config: &DrpoConfig, betas: &[f64], target: f64) -> Result<Vec<(AblationRow, RunTrace)>> {
    if config.mode == Mode::TheoryNpg {
        return Err(Error::InvalidConfig("the beta ablation needs a practical mode".into()));
    }
    if betas.is_empty() {
        return Err(Error::Empty("beta list"));
    }
    betas
        .par_iter()
        .map(|&beta| {
            let mut c = config.clone();
            c.beta = beta;
            let trace = run_drpo(inputs, &c)?;
            Ok((AblationRow::of(inputs, &trace, target)?, trace))
        })
        .collect()
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, |x| x.to_string())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("beta,reset_fraction,final_V_rhat,final_V_rstar,suboptimality,final_kl_to_ref,iterations_to_target\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.beta,
            r.reset_fraction,
            r.final_v_rhat,
            r.final_v_rstar,
            r.suboptimality,
            r.final_kl_to_ref,
            opt(&r.iterations_to_target)
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub run: String,
    pub t: usize,
    pub kl_to_ref: f64,
    pub max_state_kl: f64,
    pub v_rhat: f64,
    pub v_rstar: f64,
    /// `q_max (t - 1) / lambda` for closed-form runs.
    pub drift_bound: Option<f64>,
    /// Whether `max_state_kl` respects `drift_bound` (with `1e-9` slack).
    pub within_bound: Option<bool>,
}

pub fn frontier_rows(run: &str, trace: &RunTrace) -> Vec<FrontierRow> {
    let closed_form = matches!(trace.config.mode, Mode::TheoryNpg | Mode::PracticalNpg) && trace.settings.lambda > 0.0;
    trace
        .iterations
        .iter()
        .map(|r| {
            let bound = closed_form.then(|| kl_drift_bound(r.t, trace.settings.q_max, trace.settings.lambda));
            FrontierRow {
                run: run.to_string(),
                t: r.t,
                kl_to_ref: r.kl_to_ref,
                max_state_kl: r.max_state_kl,
                v_rhat: r.v_rhat,
                v_rstar: r.v_rstar,
                drift_bound: bound,
                within_bound: bound.map(|b| r.max_state_kl <= b + 1e-9),
            }
        })
        .collect()
}

pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut out = String::from("run,t,kl_to_ref,max_state_kl,V_rhat,V_rstar,drift_bound,within_bound\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.run,
            r.t,
            r.kl_to_ref,
            r.max_state_kl,
            r.v_rhat,
            r.v_rstar,
            opt(&r.drift_bound),
            opt(&r.within_bound)
        );
    }
    out
}
