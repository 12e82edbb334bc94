//! Episodic, time-inhomogeneous finite MDPs.
//!
//! States are indexed per step: a [`StateId`] is `(step, index)` with a
//! zero-based step, so the state sets of different steps are disjoint by
//! construction. Step `H` transitions into an implicit terminal state and is
//! therefore omitted from the transition kernel.

mod dp;
mod enumerate;
pub mod families;
mod table;
mod trajectory;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dp::{exact_value, exact_visitation, optimal_policy, ValueTables, VisitationMeasure};
pub use enumerate::{
    enumerate_trajectories, enumerate_trajectories_capped, max_trajectory_reward,
    trajectory_probability, DEFAULT_TRAJECTORY_CAP,
};
pub use table::{ActionTable, Layout, StateTable};
pub use trajectory::{rollout_from, sample_trajectory, Start, Step, Trajectory};

/// Tolerance on transition-row normalization. Rows are never renormalized.
pub const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId {
    /// Zero-based step index.
    pub step: usize,
    pub index: usize,
}

impl StateId {
    pub const fn new(step: usize, index: usize) -> Self {
        Self { step, index }
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(h={}, s={})", self.step + 1, self.index)
    }
}

/// Serialized form of an [`Mdp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpDocument {
    pub horizon: usize,
    pub states_per_step: Vec<usize>,
    pub num_actions: usize,
    /// `transitions[h][s][a][s']` for steps `1..H-1`.
    pub transitions: Vec<Vec<Vec<Vec<f64>>>>,
    /// `reward[h][s][a]`, the true per-step reward.
    pub reward: Vec<Vec<Vec<f64>>>,
    pub r_max: f64,
}

/// A validated episodic MDP. Construct with [`Mdp::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument", into = "MdpDocument")]
pub struct Mdp {
    layout: Layout,
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    reward: ActionTable,
    r_max: f64,
}

fn invalid(location: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidMdp {
        location: location.into(),
        reason: reason.into(),
    }
}

impl Mdp {
    /// Checks every structural invariant and returns the MDP, or the first
    /// violation with its `(h, s, a)` coordinates (1-based step).
    pub fn validate(doc: MdpDocument) -> Result<Self> {
        let MdpDocument {
            horizon,
            states_per_step,
            num_actions,
            transitions,
            reward,
            r_max,
        } = doc;
        if horizon == 0 {
            return Err(invalid("header", "horizon must be positive"));
        }
        if states_per_step.len() != horizon {
            return Err(invalid(
                "header",
                format!(
                    "states_per_step has {} entries for horizon {horizon}",
                    states_per_step.len()
                ),
            ));
        }
        if let Some(h) = states_per_step.iter().position(|&n| n == 0) {
            return Err(invalid(format!("h={}", h + 1), "empty state set"));
        }
        if states_per_step[0] != 1 {
            return Err(invalid("h=1", "the first step must hold exactly one initial state"));
        }
        if num_actions == 0 {
            return Err(invalid("header", "num_actions must be positive"));
        }
        if !(r_max.is_finite() && r_max >= 0.0) {
            return Err(invalid("header", format!("r_max = {r_max} must be finite and >= 0")));
        }
        let layout = Layout::new(states_per_step, num_actions);

        if transitions.len() != horizon - 1 {
            return Err(invalid(
                "transitions",
                format!("expected {} steps, found {}", horizon - 1, transitions.len()),
            ));
        }
        for (h, step) in transitions.iter().enumerate() {
            if step.len() != layout.states_at(h) {
                return Err(invalid(
                    format!("h={}", h + 1),
                    format!("{} transition blocks for {} states", step.len(), layout.states_at(h)),
                ));
            }
            for (s, per_action) in step.iter().enumerate() {
                if per_action.len() != num_actions {
                    return Err(invalid(
                        format!("(h={}, s={s})", h + 1),
                        format!("{} action rows, expected {num_actions}", per_action.len()),
                    ));
                }
                for (a, row) in per_action.iter().enumerate() {
                    let here = || format!("(h={}, s={s}, a={a})", h + 1);
                    if row.len() != layout.states_at(h + 1) {
                        return Err(invalid(
                            here(),
                            format!("row has {} entries, next step has {} states", row.len(), layout.states_at(h + 1)),
                        ));
                    }
                    if let Some(p) = row.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
                        return Err(invalid(here(), format!("negative or non-finite probability {p}")));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_TOLERANCE {
                        return Err(invalid(here(), format!("transition row sums to {sum}")));
                    }
                }
            }
        }

        let reward = ActionTable::from_nested(reward);
        reward.check_layout(&layout).map_err(|e| invalid("reward", e.to_string()))?;
        for (state, row) in reward.iter_rows() {
            for (a, &r) in row.iter().enumerate() {
                if !(r.is_finite() && (0.0..=1.0).contains(&r)) {
                    return Err(invalid(
                        format!("(h={}, s={}, a={a})", state.step + 1, state.index),
                        format!("reward {r} outside [0, 1]"),
                    ));
                }
            }
        }

        let mdp = Self {
            layout,
            transitions,
            reward,
            r_max,
        };
        let (total, witness) = max_trajectory_reward(&mdp, &mdp.reward);
        if total > r_max + ROW_TOLERANCE {
            return Err(Error::RewardExceedsRmax {
                total,
                r_max,
                witness,
            });
        }
        Ok(mdp)
    }

    pub fn horizon(&self) -> usize {
        self.layout.horizon()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_actions(&self) -> usize {
        self.layout.num_actions()
    }

    pub fn states_at(&self, step: usize) -> usize {
        self.layout.states_at(step)
    }

    pub fn initial_state(&self) -> StateId {
        StateId::new(0, 0)
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn true_reward(&self) -> &ActionTable {
        &self.reward
    }

    pub fn contains(&self, state: StateId) -> bool {
        self.layout.contains(state)
    }

    /// Next-state distribution over `S_{h+1}`; `None` at the last step.
    pub fn next_distribution(&self, state: StateId, action: usize) -> Option<&[f64]> {
        self.transitions
            .get(state.step)
            .map(|step| step[state.index][action].as_slice())
    }

    pub fn transition_prob(&self, state: StateId, action: usize, next: usize) -> f64 {
        self.next_distribution(state, action)
            .map_or(0.0, |row| row[next])
    }

    pub fn to_document(&self) -> MdpDocument {
        MdpDocument {
            horizon: self.horizon(),
            states_per_step: self.layout.states_per_step().to_vec(),
            num_actions: self.num_actions(),
            transitions: self.transitions.clone(),
            reward: self.reward.to_nested(),
            r_max: self.r_max,
        }
    }
}

impl TryFrom<MdpDocument> for Mdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        Mdp::validate(doc)
    }
}

impl From<Mdp> for MdpDocument {
    fn from(mdp: Mdp) -> Self {
        mdp.to_document()
    }
}

/// Draws an index from a probability vector. Zero-probability entries are
/// never returned.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last_positive = i;
        if target < acc {
            return i;
        }
    }
    last_positive
}
