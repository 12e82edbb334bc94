//! Bradley-Terry-Luce preference oracle and offline dataset generation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{sample_trajectory, ActionTable, Mdp, Start, Trajectory};
use crate::policy::TabularPolicy;
use crate::rng::SeedStream;

/// Monotone link `Phi` from a reward difference to a preference probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkFunction {
    Sigmoid,
    /// Piecewise-linear interpolation through `(x, Phi(x))` knots; constant
    /// beyond the outer knots.
    PiecewiseLinear { knots: Vec<(f64, f64)> },
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl LinkFunction {
    pub fn piecewise_linear(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidLink("need at least two knots".into()));
        }
        for w in knots.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if !(x1 > x0 && y1 > y0) {
                return Err(Error::InvalidLink(format!(
                    "knots must be strictly increasing, got ({x0}, {y0}) then ({x1}, {y1})"
                )));
            }
        }
        if knots.iter().any(|&(_, y)| !(y > 0.0 && y < 1.0)) {
            return Err(Error::InvalidLink("values must lie in (0, 1)".into()));
        }
        Ok(LinkFunction::PiecewiseLinear { knots })
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            LinkFunction::Sigmoid => sigmoid(x),
            LinkFunction::PiecewiseLinear { knots } => {
                let (first, last) = (knots[0], knots[knots.len() - 1]);
                if x <= first.0 {
                    return first.1;
                }
                if x >= last.0 {
                    return last.1;
                }
                let i = knots.partition_point(|k| k.0 <= x);
                let ((x0, y0), (x1, y1)) = (knots[i - 1], knots[i]);
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            LinkFunction::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            LinkFunction::PiecewiseLinear { knots } => {
                if x < knots[0].0 || x >= knots[knots.len() - 1].0 {
                    return 0.0;
                }
                let i = knots.partition_point(|k| k.0 <= x);
                let ((x0, y0), (x1, y1)) = (knots[i - 1], knots[i]);
                (y1 - y0) / (x1 - x0)
            }
        }
    }

    /// `-ln P(o = label | Delta)` where `Delta = r(tau1) - r(tau0)`.
    pub fn neg_log_likelihood(&self, delta: f64, label: bool) -> f64 {
        match self {
            LinkFunction::Sigmoid => softplus(if label { -delta } else { delta }),
            _ => {
                let p = self.eval(delta);
                -(if label { p } else { 1.0 - p }).ln()
            }
        }
    }
}

/// `P(o = 1 | tau0, tau1) = Phi(r(tau1) - r(tau0))`.
pub fn btl_prob(link: &LinkFunction, r1_minus_r0: f64) -> f64 {
    link.eval(r1_minus_r0)
}

/// `1 / inf_{|x| <= r_max} Phi'(x)`.
pub fn kappa(link: &LinkFunction, r_max: f64) -> Result<f64> {
    let inf = match link {
        // sigma' is even and decreasing in |x|.
        LinkFunction::Sigmoid => link.derivative(r_max),
        LinkFunction::PiecewiseLinear { knots } => {
            if knots[0].0 > -r_max || knots[knots.len() - 1].0 < r_max {
                return Err(Error::InvalidLink(format!(
                    "knots do not cover [-{r_max}, {r_max}]; the derivative vanishes there"
                )));
            }
            knots
                .windows(2)
                .filter(|w| w[1].0 > -r_max && w[0].0 < r_max)
                .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
                .fold(f64::INFINITY, f64::min)
        }
    };
    if !(inf > 0.0) {
        return Err(Error::InvalidLink(format!("derivative {inf} is not positive")));
    }
    Ok(1.0 / inf)
}

/// One labeled comparison; `label = true` means `tau1` is preferred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairRecord", into = "PairRecord")]
pub struct PreferencePair {
    pub tau0: Trajectory,
    pub tau1: Trajectory,
    pub label: bool,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    tau0: Trajectory,
    tau1: Trajectory,
    label: u8,
}

impl TryFrom<PairRecord> for PreferencePair {
    type Error = String;

    fn try_from(r: PairRecord) -> std::result::Result<Self, String> {
        let label = match r.label {
            0 => false,
            1 => true,
            other => return Err(format!("label must be 0 or 1, got {other}")),
        };
        Ok(PreferencePair {
            tau0: r.tau0,
            tau1: r.tau1,
            label,
        })
    }
}

impl From<PreferencePair> for PairRecord {
    fn from(p: PreferencePair) -> Self {
        PairRecord {
            tau0: p.tau0,
            tau1: p.tau1,
            label: u8::from(p.label),
        }
    }
}

impl PreferencePair {
    /// The same comparison with the trajectories swapped and the label flipped.
    pub fn flipped(&self) -> Self {
        Self {
            tau0: self.tau1.clone(),
            tau1: self.tau0.clone(),
            label: !self.label,
        }
    }
}

/// Trajectories sampled from the reference policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnlabeledDataset {
    pub trajectories: Vec<Trajectory>,
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn check(&self, mdp: &Mdp) -> Result<()> {
        for t in &self.trajectories {
            t.check(mdp)?;
            if !t.is_full(mdp.horizon()) {
                return Err(Error::PartialTrajectory {
                    start_step: t.start_step() + 1,
                });
            }
        }
        Ok(())
    }
}

/// `r(tau) = sum_h r(s_h, a_h)` for a full-horizon trajectory.
pub fn traj_reward(reward: &ActionTable, traj: &Trajectory) -> Result<f64> {
    if !traj.is_full(reward.layout().horizon()) {
        return Err(Error::PartialTrajectory {
            start_step: traj.start_step() + 1,
        });
    }
    Ok(traj.total_reward(reward))
}

/// `m` i.i.d. pairs from `pi_sft`, labeled `o ~ Bernoulli(Phi(r*(tau1) - r*(tau0)))`.
/// Pair `i` draws from the substream `stream.index(i)`.
pub fn gen_preference_dataset(
    mdp: &Mdp,
    pi_sft: &TabularPolicy,
    r_star: &ActionTable,
    link: &LinkFunction,
    m: usize,
    stream: &SeedStream,
) -> Result<Vec<PreferencePair>> {
    if m == 0 {
        return Err(Error::Empty("preference dataset request"));
    }
    (0..m as u64)
        .into_par_iter()
        .map(|i| {
            let sub = stream.index(i);
            let mut rng = sub.rng();
            let tau0 = sample_trajectory(mdp, pi_sft, Start::Initial, &mut rng)?.with_stream(sub.key());
            let tau1 = sample_trajectory(mdp, pi_sft, Start::Initial, &mut rng)?.with_stream(sub.key());
            let p = btl_prob(link, tau1.total_reward(r_star) - tau0.total_reward(r_star));
            let label = rand::Rng::gen::<f64>(&mut rng) < p;
            Ok(PreferencePair { tau0, tau1, label })
        })
        .collect()
}

/// `n` i.i.d. full trajectories from `pi_sft`.
pub fn gen_unlabeled_dataset(
    mdp: &Mdp,
    pi_sft: &TabularPolicy,
    n: usize,
    stream: &SeedStream,
) -> Result<UnlabeledDataset> {
    if n == 0 {
        return Err(Error::Empty("unlabeled dataset request"));
    }
    let trajectories = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let sub = stream.index(i);
            Ok(sample_trajectory(mdp, pi_sft, Start::Initial, &mut sub.rng())?.with_stream(sub.key()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnlabeledDataset { trajectories })
}
