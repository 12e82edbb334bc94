//! Tabular policies, KL diagnostics, and uniform mixtures.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{exact_value, exact_visitation, ActionTable, Layout, Mdp, StateId, Trajectory};

/// Probabilities at or below this are exact zeros for support checks.
pub const SUPPORT_EPS: f64 = 1e-300;

const ROW_TOLERANCE: f64 = 1e-12;

/// A distribution over actions at every state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDocument", into = "PolicyDocument")]
pub struct TabularPolicy {
    probs: ActionTable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyDocument {
    /// `probabilities[h][s]` is the action distribution at state `(h, s)`.
    pub probabilities: ActionTable,
}

impl TryFrom<PolicyDocument> for TabularPolicy {
    type Error = Error;

    fn try_from(doc: PolicyDocument) -> Result<Self> {
        TabularPolicy::new(doc.probabilities)
    }
}

impl From<TabularPolicy> for PolicyDocument {
    fn from(p: TabularPolicy) -> Self {
        PolicyDocument {
            probabilities: p.probs,
        }
    }
}

impl TabularPolicy {
    pub fn new(probs: ActionTable) -> Result<Self> {
        for (state, row) in probs.iter_rows() {
            if let Some(p) = row.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
                return Err(Error::InvalidPolicy {
                    state,
                    reason: format!("entry {p} is negative or non-finite"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidPolicy {
                    state,
                    reason: format!("row sums to {sum}"),
                });
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(layout: &Layout) -> Self {
        let p = 1.0 / layout.num_actions() as f64;
        Self {
            probs: ActionTable::filled(layout, p),
        }
    }

    pub fn deterministic(layout: &Layout, mut choose: impl FnMut(StateId) -> usize) -> Self {
        let mut probs = ActionTable::zeros(layout);
        for s in layout.states() {
            let a = choose(s);
            probs.set(s, a, 1.0);
        }
        Self { probs }
    }

    /// `(1 - w) * self + w * other`, row by row.
    pub fn blend(&self, other: &Self, w: f64) -> Self {
        let mut probs = self.probs.clone();
        for (s, row) in other.probs.iter_rows() {
            for (a, p) in probs.row_mut(s).iter_mut().enumerate() {
                *p = (1.0 - w) * *p + w * row[a];
            }
        }
        Self { probs }
    }

    /// Random rows with exponential weights; each entry is zeroed with
    /// probability `zero_prob`, keeping at least one action per row.
    pub fn random<R: Rng + ?Sized>(layout: &Layout, rng: &mut R, zero_prob: f64) -> Self {
        Self::random_on_support(&Self::uniform(layout), rng, zero_prob)
    }

    /// Like [`TabularPolicy::random`], restricted to the support of `reference`.
    pub fn random_on_support<R: Rng + ?Sized>(reference: &Self, rng: &mut R, zero_prob: f64) -> Self {
        let mut probs = reference.probs.clone();
        for (s, row) in reference.probs.iter_rows() {
            let support: Vec<usize> = (0..row.len()).filter(|&a| row[a] > SUPPORT_EPS).collect();
            let keep = support[rng.gen_range(0..support.len())];
            let out = probs.row_mut(s);
            for (a, p) in out.iter_mut().enumerate() {
                *p = if !support.contains(&a) || (a != keep && rng.gen::<f64>() < zero_prob) {
                    0.0
                } else {
                    -(1.0 - rng.gen::<f64>()).ln()
                };
            }
            if out[keep] == 0.0 {
                out[keep] = 1.0;
            }
            let z: f64 = out.iter().sum();
            out.iter_mut().for_each(|p| *p /= z);
        }
        Self { probs }
    }

    pub fn prob(&self, state: StateId, action: usize) -> f64 {
        self.probs.get(state, action)
    }

    pub fn row(&self, state: StateId) -> &[f64] {
        self.probs.row(state)
    }

    pub fn table(&self) -> &ActionTable {
        &self.probs
    }

    pub fn layout(&self) -> Layout {
        self.probs.layout()
    }

    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        self.probs.check_layout(layout)
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        self.probs
            .iter_rows()
            .map(|(s, row)| {
                0.5 * row
                    .iter()
                    .zip(other.row(s))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// First `(state, action)` where `self` has mass but `reference` does not.
    pub fn support_violation(&self, reference: &Self) -> Option<(StateId, usize)> {
        self.probs.iter_rows().find_map(|(s, row)| {
            row.iter()
                .zip(reference.row(s))
                .position(|(&p, &q)| p > 0.0 && q <= SUPPORT_EPS)
                .map(|a| (s, a))
        })
    }
}

/// A uniform mixture: each episode plays one member chosen uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TabularPolicy>", into = "Vec<TabularPolicy>")]
pub struct MixturePolicy {
    members: Vec<TabularPolicy>,
}

impl MixturePolicy {
    pub fn new(members: Vec<TabularPolicy>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Empty("mixture"));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[TabularPolicy] {
        &self.members
    }
}

impl TryFrom<Vec<TabularPolicy>> for MixturePolicy {
    type Error = Error;

    fn try_from(members: Vec<TabularPolicy>) -> Result<Self> {
        MixturePolicy::new(members)
    }
}

impl From<MixturePolicy> for Vec<TabularPolicy> {
    fn from(m: MixturePolicy) -> Self {
        m.members
    }
}

/// `KL(p || q)` in nats, with `0 ln(0/q) = 0`.
pub fn kl_per_state(p: &[f64], q: &[f64]) -> Result<f64> {
    kl_at(p, q, "state")
}

fn kl_at(p: &[f64], q: &[f64], location: &str) -> Result<f64> {
    let mut kl = 0.0;
    for (a, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if pa <= SUPPORT_EPS {
            continue;
        }
        if qa <= SUPPORT_EPS {
            return Err(Error::SupportViolation {
                location: location.to_string(),
                action: a,
                mass: pa,
            });
        }
        kl += pa * (pa / qa).ln();
    }
    // Rounding can leave a tiny negative value for p ~= q.
    Ok(kl.max(0.0))
}

/// Per-step `ln(pi(a_h|s_h) / pi_ref(a_h|s_h))` along a trajectory.
pub fn trajectory_log_ratio(
    traj: &Trajectory,
    pi: &TabularPolicy,
    pi_ref: &TabularPolicy,
) -> Result<Vec<f64>> {
    traj.steps()
        .iter()
        .map(|step| {
            let p = pi.prob(step.state, step.action);
            let q = pi_ref.prob(step.state, step.action);
            if p <= SUPPORT_EPS {
                return Err(Error::ZeroProbabilityAction {
                    state: step.state,
                    action: step.action,
                    which: "pi",
                });
            }
            if q <= SUPPORT_EPS {
                return Err(Error::ZeroProbabilityAction {
                    state: step.state,
                    action: step.action,
                    which: "pi_ref",
                });
            }
            Ok((p / q).ln())
        })
        .collect()
}

/// `sum_h E_{s ~ d^pi_h} KL(pi(s) || pi_ref(s))`, computed exactly.
pub fn policy_kl_to_ref(mdp: &Mdp, pi: &TabularPolicy, pi_ref: &TabularPolicy) -> Result<f64> {
    let visitation = exact_visitation(mdp, pi);
    let mut total = 0.0;
    for s in mdp.layout().states() {
        let w = visitation.state(s);
        // States pi never reaches do not contribute, even if their rows
        // violate support.
        if w == 0.0 {
            continue;
        }
        total += w * kl_at(pi.row(s), pi_ref.row(s), &s.to_string())?;
    }
    Ok(total)
}

/// `max_s KL(pi(s) || pi_ref(s))` over every state of the layout.
pub fn max_state_kl(pi: &TabularPolicy, pi_ref: &TabularPolicy) -> Result<f64> {
    pi.table().iter_rows().try_fold(0.0_f64, |acc, (s, row)| {
        Ok(acc.max(kl_at(row, pi_ref.row(s), &s.to_string())?))
    })
}

/// Value of a uniform mixture: the mean of its members' exact values.
pub fn mixture_value(mdp: &Mdp, mix: &MixturePolicy, reward: &ActionTable) -> f64 {
    let n = mix.members().len() as f64;
    mix.members()
        .iter()
        .map(|pi| exact_value(mdp, pi, reward).value())
        .sum::<f64>()
        / n
}
