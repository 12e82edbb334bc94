//! Maximum-likelihood reward learning from preference pairs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{enumerate_trajectories_capped, max_trajectory_reward, sample_trajectory, ActionTable, Layout, Mdp, Start};
use crate::policy::TabularPolicy;
use crate::preference::{LinkFunction, PreferencePair};
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RewardSource {
    /// Member `index` of a declared finite class.
    Finite { index: usize },
    /// Free per-(s, a) table; `gauge` describes how the per-step shift was fixed.
    Tabular { gauge: String },
    /// The environment's own reward.
    Truth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    #[serde(flatten)]
    pub source: RewardSource,
    pub table: ActionTable,
}

impl RewardModel {
    pub fn truth(mdp: &Mdp) -> Self {
        Self {
            source: RewardSource::Truth,
            table: mdp.true_reward().clone(),
        }
    }

    /// Per-step values in `[0, 1]` and a layout matching the MDP; returns the
    /// largest reachable trajectory total.
    pub fn check(&self, mdp: &Mdp) -> Result<f64> {
        self.table.check_layout(mdp.layout())?;
        if let Some((s, row)) = self.table.iter_rows().find(|(_, row)| row.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::ShapeMismatch(format!("reward at {s} has values {row:?} outside [0, 1]")));
        }
        Ok(max_trajectory_reward(mdp, &self.table).0)
    }
}

pub const GAUGE_NOTE: &str = "each step shifted so its smallest entry is 0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    pub mode: String,
    /// Mean negative log-likelihood per pair at exit.
    pub nll: f64,
    pub pairs: usize,
    pub iterations: usize,
    pub grad_norm: Option<f64>,
    pub converged: bool,
    /// NLL (sum) of each finite-class member.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_nll: Vec<f64>,
    /// Mean NLL after every accepted step, starting from the initialization.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<f64>,
    /// Largest reachable trajectory total of the chosen model.
    pub max_total: Option<f64>,
    pub exceeds_r_max: bool,
    pub pairwise_error: Option<f64>,
}

/// `sum_m -ln P(o_m | tau0_m, tau1_m; r)`.
pub fn nll(reward: &ActionTable, data: &[PreferencePair], link: &LinkFunction) -> Result<f64> {
    let mut total = 0.0;
    for (i, p) in data.iter().enumerate() {
        let delta = p.tau1.total_reward(reward) - p.tau0.total_reward(reward);
        let l = link.neg_log_likelihood(delta, p.label);
        if !l.is_finite() {
            return Err(Error::InfiniteLoss { index: i });
        }
        total += l;
    }
    Ok(total)
}

/// Argmin of the NLL over `class`; ties go to the lowest index.
pub fn mle_finite(
    class: &[ActionTable],
    data: &[PreferencePair],
    link: &LinkFunction,
) -> Result<(RewardModel, MleReport)> {
    if class.is_empty() {
        return Err(Error::Empty("reward class"));
    }
    // Infinite loss disqualifies a member rather than failing the search.
    let class_nll: Vec<f64> = class
        .iter()
        .map(|r| nll(r, data, link).unwrap_or(f64::INFINITY))
        .collect();
    let (best, &value) = class_nll
        .iter()
        .enumerate()
        .fold((0, &class_nll[0]), |m, c| if c.1 < m.1 { c } else { m });
    if !value.is_finite() {
        return Err(Error::InfiniteLoss { index: 0 });
    }
    let m = data.len().max(1) as f64;
    Ok((
        RewardModel {
            source: RewardSource::Finite { index: best },
            table: class[best].clone(),
        },
        MleReport {
            mode: "finite".into(),
            nll: value / m,
            pairs: data.len(),
            iterations: 0,
            grad_norm: None,
            converged: true,
            class_nll,
            history: Vec::new(),
            max_total: None,
            exceeds_r_max: false,
            pairwise_error: None,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleOptions {
    pub max_iters: usize,
    /// Initial step on the summed NLL is `step_scale / M`.
    pub step_scale: f64,
    pub grad_tol: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            step_scale: 0.1,
            grad_tol: 1e-8,
        }
    }
}

/// Pairs collapsed to distinct sparse feature differences with label counts.
struct Design {
    groups: Vec<(Vec<(usize, f64)>, [f64; 2])>,
    dim: usize,
    pairs: f64,
}

fn flat_offsets(layout: &Layout) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layout.horizon() + 1);
    let mut acc = 0;
    for h in 0..layout.horizon() {
        offsets.push(acc);
        acc += layout.states_at(h) * layout.num_actions();
    }
    offsets.push(acc);
    offsets
}

impl Design {
    fn new(layout: &Layout, data: &[PreferencePair]) -> Result<Self> {
        let offsets = flat_offsets(layout);
        let na = layout.num_actions();
        let mut grouped: BTreeMap<Vec<(usize, i64)>, [f64; 2]> = BTreeMap::new();
        for p in data {
            let mut coeff: BTreeMap<usize, i64> = BTreeMap::new();
            for (traj, sign) in [(&p.tau1, 1), (&p.tau0, -1)] {
                if !traj.is_full(layout.horizon()) {
                    return Err(Error::PartialTrajectory {
                        start_step: traj.start_step() + 1,
                    });
                }
                for st in traj.steps() {
                    if !layout.contains(st.state) || st.action >= na {
                        return Err(Error::UnknownState(st.state));
                    }
                    let idx = offsets[st.state.step] + st.state.index * na + st.action;
                    *coeff.entry(idx).or_default() += sign;
                }
            }
            let key: Vec<_> = coeff.into_iter().filter(|&(_, c)| c != 0).collect();
            grouped.entry(key).or_default()[usize::from(p.label)] += 1.0;
        }
        Ok(Self {
            groups: grouped
                .into_iter()
                .map(|(k, c)| (k.into_iter().map(|(i, v)| (i, v as f64)).collect(), c))
                .collect(),
            dim: offsets[layout.horizon()],
            pairs: data.len() as f64,
        })
    }

    fn delta(x: &[(usize, f64)], theta: &[f64]) -> f64 {
        x.iter().map(|&(i, c)| c * theta[i]).sum()
    }

    fn mean_nll(&self, theta: &[f64]) -> f64 {
        let link = LinkFunction::Sigmoid;
        self.groups
            .iter()
            .map(|(x, [c0, c1])| {
                let d = Self::delta(x, theta);
                c0 * link.neg_log_likelihood(d, false) + c1 * link.neg_log_likelihood(d, true)
            })
            .sum::<f64>()
            / self.pairs
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for (x, [c0, c1]) in &self.groups {
            let s = crate::preference::sigmoid(Self::delta(x, theta));
            // d/dDelta of c0*softplus(Delta) + c1*softplus(-Delta)
            let w = (c0 * s - c1 * (1.0 - s)) / self.pairs;
            for &(i, c) in x {
                g[i] += w * c;
            }
        }
        g
    }
}

fn project(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Monotone accelerated projected gradient (FISTA with function-value
/// restarts) on the mean NLL over per-step tabular rewards in `[0, 1]`,
/// started from 0.5 everywhere. Steps are found by backtracking on the
/// quadratic upper bound and grow by 25% between iterations. Stops when the
/// projected gradient at the iterate is below `grad_tol`, or when a step
/// without momentum no longer lowers the objective at double precision. After convergence
/// every step is shifted so its smallest entry is 0.
pub fn mle_tabular(
    mdp: &Mdp,
    data: &[PreferencePair],
    link: &LinkFunction,
    opts: &MleOptions,
) -> Result<(RewardModel, MleReport)> {
    if *link != LinkFunction::Sigmoid {
        return Err(Error::InvalidLink("tabular MLE requires the sigmoid link".into()));
    }
    let layout = mdp.layout();
    let init = ActionTable::filled(layout, 0.5);
    if data.is_empty() {
        let report = MleReport {
            mode: "tabular".into(),
            nll: 0.0,
            pairs: 0,
            iterations: 0,
            grad_norm: Some(0.0),
            converged: true,
            class_nll: Vec::new(),
            history: vec![0.0],
            max_total: Some(max_trajectory_reward(mdp, &init).0),
            exceeds_r_max: false,
            pairwise_error: None,
        };
        let model = RewardModel {
            source: RewardSource::Tabular { gauge: "initialization".into() },
            table: init,
        };
        return Ok((model, report));
    }

    let design = Design::new(layout, data)?;
    let mut theta = vec![0.5; design.dim];
    let mut f = design.mean_nll(&theta);
    let mut history = vec![f];
    let mut step = opts.step_scale;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut y = theta.clone();
    let mut momentum = 1.0_f64;
    while iterations < opts.max_iters {
        let g_theta = design.gradient(&theta);
        grad_norm = theta
            .iter()
            .zip(&g_theta)
            .map(|(t, gi)| (t - project(t - gi)).powi(2))
            .sum::<f64>()
            .sqrt();
        if grad_norm <= opts.grad_tol {
            converged = true;
            break;
        }
        let fy = design.mean_nll(&y);
        let gy = design.gradient(&y);
        let mut z;
        let mut fz;
        loop {
            z = y.iter().zip(&gy).map(|(v, gi)| project(v - step * gi)).collect::<Vec<f64>>();
            fz = design.mean_nll(&z);
            let (lin, sq) = z.iter().zip(&y).zip(&gy).fold((0.0, 0.0), |(l, q), ((zi, yi), gi)| {
                (l + gi * (zi - yi), q + (zi - yi).powi(2))
            });
            if fz <= fy + lin + sq / (2.0 * step) + 1e-15 * fy.abs() || step < 1e-18 {
                break;
            }
            step *= 0.5;
        }
        let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
        let prev = theta.clone();
        if fz <= f {
            theta = z.clone();
            f = fz;
            y = (0..theta.len())
                .map(|i| theta[i] + (momentum - 1.0) / next_momentum * (theta[i] - prev[i]))
                .map(project)
                .collect();
            momentum = next_momentum;
        } else if momentum == 1.0 {
            // A plain projected step cannot lower the objective in floating
            // point: nothing left to gain.
            converged = true;
            break;
        } else {
            // Restart from the best point without momentum.
            y = theta.clone();
            momentum = 1.0;
        }
        history.push(f);
        iterations += 1;
        step *= 1.25;
    }

    let offsets = flat_offsets(layout);
    let na = layout.num_actions();
    let mut table = ActionTable::from_fn(layout, |s, a| theta[offsets[s.step] + s.index * na + a]);
    for h in 0..layout.horizon() {
        let rows = table.step_mut(h);
        let low = rows.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        rows.iter_mut().flatten().for_each(|v| *v -= low);
    }
    let max_total = max_trajectory_reward(mdp, &table).0;
    let report = MleReport {
        mode: "tabular".into(),
        nll: f,
        pairs: data.len(),
        iterations,
        grad_norm: Some(grad_norm),
        converged,
        class_nll: Vec::new(),
        history,
        max_total: Some(max_total),
        exceeds_r_max: max_total > mdp.r_max() + 1e-12,
        pairwise_error: None,
    };
    let model = RewardModel {
        source: RewardSource::Tabular { gauge: GAUGE_NOTE.into() },
        table,
    };
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseError {
    pub value: f64,
    /// False when the value is a Monte-Carlo estimate.
    pub exact: bool,
    pub samples: usize,
}

/// `E_{tau0, tau1 ~ d^SFT}[(Delta r* - Delta r_hat)^2]` by enumeration. With
/// `g = r* - r_hat` this is `2 Var(g(tau))`.
pub fn mle_error(
    mdp: &Mdp,
    r_hat: &ActionTable,
    r_star: &ActionTable,
    pi_sft: &TabularPolicy,
    cap: usize,
) -> Result<f64> {
    let support = enumerate_trajectories_capped(mdp, pi_sft, cap)?;
    let g: Vec<(f64, f64)> = support
        .iter()
        .map(|(t, p)| (*p, t.total_reward(r_star) - t.total_reward(r_hat)))
        .collect();
    let mean: f64 = g.iter().map(|(p, x)| p * x).sum();
    Ok(2.0 * g.iter().map(|(p, x)| p * (x - mean).powi(2)).sum::<f64>())
}

/// Monte-Carlo estimate of [`mle_error`] from `samples` independent pairs,
/// with its standard error.
pub fn mle_error_monte_carlo(
    mdp: &Mdp,
    r_hat: &ActionTable,
    r_star: &ActionTable,
    pi_sft: &TabularPolicy,
    samples: usize,
    stream: &SeedStream,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::Empty("Monte-Carlo sample"));
    }
    let mut rng = stream.rng();
    let mut vals = Vec::with_capacity(samples);
    for _ in 0..samples {
        let a = sample_trajectory(mdp, pi_sft, Start::Initial, &mut rng)?;
        let b = sample_trajectory(mdp, pi_sft, Start::Initial, &mut rng)?;
        let d = (a.total_reward(r_star) - b.total_reward(r_star)) - (a.total_reward(r_hat) - b.total_reward(r_hat));
        vals.push(d * d);
    }
    let n = samples as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Exact when the trajectory count fits `cap`, Monte-Carlo otherwise when
/// `fallback` is given.
pub fn pairwise_error(
    mdp: &Mdp,
    r_hat: &ActionTable,
    r_star: &ActionTable,
    pi_sft: &TabularPolicy,
    cap: usize,
    fallback: Option<(usize, &SeedStream)>,
) -> Result<PairwiseError> {
    match mle_error(mdp, r_hat, r_star, pi_sft, cap) {
        Ok(value) => Ok(PairwiseError { value, exact: true, samples: 0 }),
        Err(Error::EnumerationInfeasible { .. }) if fallback.is_some() => {
            let (samples, stream) = fallback.unwrap();
            let (value, _) = mle_error_monte_carlo(mdp, r_hat, r_star, pi_sft, samples, stream)?;
            Ok(PairwiseError { value, exact: false, samples })
        }
        Err(e) => Err(e),
    }
}
