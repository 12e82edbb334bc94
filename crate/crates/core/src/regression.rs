//! Reward-to-go regression targets and least-squares critics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{exact_value, exact_visitation, ActionTable, Layout, Mdp, StateId, Trajectory};
use crate::policy::TabularPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSample {
    pub state: StateId,
    pub action: usize,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QProvenance {
    FiniteClass { index: usize },
    TabularEmpirical,
    /// Every-visit Monte-Carlo returns of the KL-penalized reward.
    Penalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEstimate {
    pub provenance: QProvenance,
    pub table: ActionTable,
}

/// One sample per trajectory: its first pair and the learned reward-to-go.
pub fn build_regression_set(online: &[Trajectory], r_hat: &ActionTable) -> Vec<RegressionSample> {
    online
        .iter()
        .map(|t| {
            let first = t.first();
            RegressionSample {
                state: first.state,
                action: first.action,
                target: t.total_reward(r_hat),
            }
        })
        .collect()
}

/// Per-(s, a) mean target clipped to `[0, r_max]`; unvisited pairs are 0.
pub fn lsq_tabular(layout: &Layout, samples: &[RegressionSample], r_max: f64) -> QEstimate {
    let mut sum = ActionTable::zeros(layout);
    let mut count = ActionTable::zeros(layout);
    for s in samples {
        sum.row_mut(s.state)[s.action] += s.target;
        count.row_mut(s.state)[s.action] += 1.0;
    }
    let table = ActionTable::from_fn(layout, |s, a| {
        let n = count.get(s, a);
        if n == 0.0 {
            0.0
        } else {
            (sum.get(s, a) / n).clamp(0.0, r_max)
        }
    });
    QEstimate {
        provenance: QProvenance::TabularEmpirical,
        table,
    }
}

/// Mean squared error of `f` on the samples (0 for an empty set).
pub fn squared_loss(f: &ActionTable, samples: &[RegressionSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| (f.get(s.state, s.action) - s.target).powi(2))
        .sum::<f64>()
        / samples.len() as f64
}

/// Least-squares argmin over a finite class; ties go to the lowest index.
pub fn lsq_finite(class: &[ActionTable], samples: &[RegressionSample]) -> Result<QEstimate> {
    if class.is_empty() {
        return Err(Error::Empty("regression class"));
    }
    let mut best = (0, f64::INFINITY);
    for (i, f) in class.iter().enumerate() {
        let loss = squared_loss(f, samples);
        if loss < best.1 {
            best = (i, loss);
        }
    }
    Ok(QEstimate {
        provenance: QProvenance::FiniteClass { index: best.0 },
        table: class[best.0].clone(),
    })
}

/// `E_{h ~ Unif[H], s ~ d^SFT_h, a ~ (pi_sft + pi_t)/2} (q_hat - Q^{pi_t, r_hat})^2`,
/// the measure the reset collector samples regression points from.
pub fn weighted_q_error(
    mdp: &Mdp,
    q_hat: &ActionTable,
    pi_sft: &TabularPolicy,
    pi_t: &TabularPolicy,
    r_hat: &ActionTable,
) -> f64 {
    let d = exact_visitation(mdp, pi_sft);
    let q = exact_value(mdp, pi_t, r_hat).q;
    let mut total = 0.0;
    for s in mdp.layout().states() {
        let ds = d.state(s);
        if ds == 0.0 {
            continue;
        }
        for a in 0..mdp.num_actions() {
            let w = 0.5 * (pi_sft.prob(s, a) + pi_t.prob(s, a));
            total += ds * w * (q_hat.get(s, a) - q.get(s, a)).powi(2);
        }
    }
    total / mdp.horizon() as f64
}
