use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{rollout_from, sample_categorical, ActionTable, Mdp, Trajectory};
use crate::policy::{trajectory_log_ratio, TabularPolicy};
use crate::rng::SeedStream;

/// How a reset rollout picks its first action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetAction {
    /// Drawn from `(pi_sft + pi_t) / 2`, then `pi_t` to the horizon.
    Mixture,
    /// `pi_t` throughout.
    Current,
}

/// An online rollout with the learned reward and `ln(pi_t / pi_sft)` at each step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTrajectory {
    pub trajectory: Trajectory,
    pub rewards: Vec<f64>,
    pub log_ratios: Vec<f64>,
    pub reset: bool,
}

impl AnnotatedTrajectory {
    pub fn learned_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Fills `slots` rollouts. Slot `n` uses the substream `stream.index(n)`: a
/// coin is always drawn; with probability `beta` the slot resets to `s_h` of
/// a chunk trajectory chosen uniformly, with `h ~ Unif([H])`, otherwise it
/// starts at `s_1` and follows `pi_t`.
#[allow(clippy::too_many_arguments)]
pub fn collect_online_reset(
    mdp: &Mdp,
    pi_t: &TabularPolicy,
    pi_sft: &TabularPolicy,
    chunk: &[Trajectory],
    beta: f64,
    reset_action: ResetAction,
    slots: usize,
    r_hat: &ActionTable,
    stream: &SeedStream,
) -> Result<Vec<AnnotatedTrajectory>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!("beta = {beta} is outside [0, 1]")));
    }
    if beta > 0.0 && chunk.is_empty() {
        return Err(Error::Empty("reset chunk"));
    }
    if let Some(t) = chunk.iter().find(|t| !t.is_full(mdp.horizon())) {
        return Err(Error::PartialTrajectory {
            start_step: t.start_step() + 1,
        });
    }
    let horizon = mdp.horizon();
    (0..slots as u64)
        .into_par_iter()
        .map(|n| {
            let mut rng = stream.index(n).rng();
            let coin: f64 = rng.gen();
            let trajectory = if coin < beta {
                let source = &chunk[rng.gen_range(0..chunk.len())];
                let s = source.steps()[rng.gen_range(0..horizon)].state;
                let a = match reset_action {
                    ResetAction::Current => sample_categorical(pi_t.row(s), &mut rng),
                    ResetAction::Mixture => {
                        let mix: Vec<f64> = pi_sft
                            .row(s)
                            .iter()
                            .zip(pi_t.row(s))
                            .map(|(x, y)| 0.5 * (x + y))
                            .collect();
                        sample_categorical(&mix, &mut rng)
                    }
                };
                rollout_from(mdp, s, a, pi_t, &mut rng)
            } else {
                let s = mdp.initial_state();
                let a = sample_categorical(pi_t.row(s), &mut rng);
                rollout_from(mdp, s, a, pi_t, &mut rng)
            };
            let rewards = trajectory.steps().iter().map(|st| r_hat.get(st.state, st.action)).collect();
            let log_ratios = trajectory_log_ratio(&trajectory, pi_t, pi_sft)?;
            Ok(AnnotatedTrajectory {
                trajectory,
                rewards,
                log_ratios,
                reset: coin < beta,
            })
        })
        .collect()
}
