//! Exhaustive trajectory enumeration: the brute-force oracle behind the
//! concentrability coefficients, MLE error and the dynamic-programming checks.

use super::{ActionTable, Mdp, StateId, StateTable, Step, Trajectory};
use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

pub const DEFAULT_TRAJECTORY_CAP: usize = 1_000_000;

pub fn enumerate_trajectories(mdp: &Mdp, policy: &TabularPolicy) -> Result<Vec<(Trajectory, f64)>> {
    enumerate_trajectories_capped(mdp, policy, DEFAULT_TRAJECTORY_CAP)
}

/// Every full trajectory with positive probability under `policy`, with its
/// probability `d^pi(tau)`. Fails once more than `cap` are found.
pub fn enumerate_trajectories_capped(
    mdp: &Mdp,
    policy: &TabularPolicy,
    cap: usize,
) -> Result<Vec<(Trajectory, f64)>> {
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(mdp.horizon());
    walk(mdp, policy, mdp.initial_state(), 1.0, &mut prefix, &mut out, cap)?;
    Ok(out)
}

fn walk(
    mdp: &Mdp,
    policy: &TabularPolicy,
    s: StateId,
    prob: f64,
    prefix: &mut Vec<Step>,
    out: &mut Vec<(Trajectory, f64)>,
    cap: usize,
) -> Result<()> {
    for (a, &pa) in policy.row(s).iter().enumerate() {
        if pa <= 0.0 {
            continue;
        }
        prefix.push(Step::new(s, a));
        match mdp.next_distribution(s, a) {
            None => {
                if out.len() == cap {
                    return Err(Error::EnumerationInfeasible {
                        count: cap + 1,
                        cap,
                    });
                }
                out.push((Trajectory::new(0, prefix.clone()), prob * pa));
            }
            Some(next) => {
                for (sp, &q) in next.iter().enumerate() {
                    if q > 0.0 {
                        walk(mdp, policy, StateId::new(s.step + 1, sp), prob * pa * q, prefix, out, cap)?;
                    }
                }
            }
        }
        prefix.pop();
    }
    Ok(())
}

/// `d^pi(tau)` for a full trajectory.
pub fn trajectory_probability(mdp: &Mdp, policy: &TabularPolicy, traj: &Trajectory) -> f64 {
    let steps = traj.steps();
    let mut p = 1.0;
    for (i, st) in steps.iter().enumerate() {
        p *= policy.prob(st.state, st.action);
        if let Some(next) = steps.get(i + 1) {
            p *= mdp.transition_prob(st.state, st.action, next.state.index);
        }
        if p == 0.0 {
            break;
        }
    }
    p
}

/// Largest trajectory total over every path reachable with positive
/// transition probability, with a witness path.
pub fn max_trajectory_reward(mdp: &Mdp, reward: &ActionTable) -> (f64, Vec<(StateId, usize)>) {
    let layout = mdp.layout();
    let mut best = StateTable::zeros(layout);
    let mut arg = vec![Vec::new(); mdp.horizon()];
    for h in (0..mdp.horizon()).rev() {
        arg[h] = vec![(0usize, 0usize); mdp.states_at(h)];
        for s in 0..mdp.states_at(h) {
            let sid = StateId::new(h, s);
            let mut top = f64::NEG_INFINITY;
            for a in 0..mdp.num_actions() {
                let (tail, next) = match mdp.next_distribution(sid, a) {
                    None => (0.0, 0),
                    Some(row) => row
                        .iter()
                        .enumerate()
                        .filter(|(_, &q)| q > 0.0)
                        .map(|(sp, _)| (best.step(h + 1)[sp], sp))
                        .fold((f64::NEG_INFINITY, 0), |m, c| if c.0 > m.0 { c } else { m }),
                };
                let total = reward.get(sid, a) + tail;
                if total > top {
                    top = total;
                    arg[h][s] = (a, next);
                }
            }
            best.set(sid, top);
        }
    }
    let mut witness = Vec::with_capacity(mdp.horizon());
    let mut s = 0;
    for (h, choices) in arg.iter().enumerate() {
        let (a, next) = choices[s];
        witness.push((StateId::new(h, s), a));
        s = next;
    }
    (best.get(mdp.initial_state()), witness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::families::{chain, random};

    #[test]
    fn chain2_has_four_equiprobable_trajectories() {
        let mdp = chain(2, 0.0);
        let all = enumerate_trajectories(&mdp, &TabularPolicy::uniform(mdp.layout())).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.iter().all(|(_, p)| *p == 0.25));
        for (t, p) in &all {
            assert_eq!(trajectory_probability(&mdp, &TabularPolicy::uniform(mdp.layout()), t), *p);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mdp = random(4, 3, 2, 0.3, 8);
        let all = enumerate_trajectories(&mdp, &TabularPolicy::uniform(mdp.layout())).unwrap();
        let total: f64 = all.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let mdp = random(4, 3, 2, 0.0, 8);
        let err = enumerate_trajectories_capped(&mdp, &TabularPolicy::uniform(mdp.layout()), 10).unwrap_err();
        assert!(matches!(err, Error::EnumerationInfeasible { cap: 10, .. }));
    }

    #[test]
    fn max_reward_matches_enumeration() {
        for seed in 0..10 {
            let mdp = random(3, 3, 3, 0.4, seed);
            let r = mdp.true_reward();
            let (dp, witness) = max_trajectory_reward(&mdp, r);
            let brute = enumerate_trajectories(&mdp, &TabularPolicy::uniform(mdp.layout()))
                .unwrap()
                .iter()
                .map(|(t, _)| t.total_reward(r))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((dp - brute).abs() < 1e-12);
            let w: f64 = witness.iter().map(|&(s, a)| r.get(s, a)).sum();
            assert!((w - dp).abs() < 1e-12);
        }
    }
}
