//! Generators for the MDP families used by the experiments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{max_trajectory_reward, optimal_policy, ActionTable, Layout, Mdp, MdpDocument, StateId};
use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::rng::SeedStream;

/// Family specification as accepted by `gen-mdp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilySpec {
    Chain { length: usize, #[serde(default)] slip: f64 },
    Gridworld { width: usize, height: usize, horizon: usize, #[serde(default)] slip: f64 },
    Random { horizon: usize, states: usize, actions: usize, #[serde(default)] sparsity: f64 },
}

impl FamilySpec {
    /// Checks the parameters, then builds.
    pub fn try_build(&self, seed: u64) -> Result<Mdp> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("family spec: {what}")));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        match *self {
            FamilySpec::Chain { length, slip } => {
                if length == 0 {
                    return bad("chain length must be positive");
                }
                if !unit(slip) {
                    return bad("slip must lie in [0, 1]");
                }
            }
            FamilySpec::Gridworld { width, height, horizon, slip } => {
                if width == 0 || height == 0 || horizon == 0 {
                    return bad("gridworld dimensions must be positive");
                }
                if !unit(slip) {
                    return bad("slip must lie in [0, 1]");
                }
            }
            FamilySpec::Random { horizon, states, actions, sparsity } => {
                if horizon == 0 || states == 0 || actions == 0 {
                    return bad("random MDP sizes must be positive");
                }
                if !unit(sparsity) {
                    return bad("sparsity must lie in [0, 1]");
                }
            }
        }
        Ok(self.build(seed))
    }

    /// Panics on parameters that [`FamilySpec::try_build`] rejects.
    pub fn build(&self, seed: u64) -> Mdp {
        match *self {
            FamilySpec::Chain { length, slip } => chain(length, slip),
            FamilySpec::Gridworld { width, height, horizon, slip } => gridworld(width, height, horizon, slip),
            FamilySpec::Random { horizon, states, actions, sparsity } => {
                random(horizon, states, actions, sparsity, seed)
            }
        }
    }
}

/// Sparse chain of `length` steps. State 0 is on the chain, state 1 has
/// fallen off. Action 0 advances (slipping off with probability `slip`),
/// action 1 falls off; fallen states are absorbing. The only reward is 1 for
/// advancing at the last on-chain state.
///
/// `chain(2, 0.0)` is the two-step example used throughout the tests: `s1`
/// branches to `sA` (index 0) under `a0` and to `sB` (index 1) under `a1`.
pub fn chain(length: usize, slip: f64) -> Mdp {
    assert!(length >= 1, "chain length must be positive");
    assert!((0.0..=1.0).contains(&slip));
    let mut states = vec![2; length];
    states[0] = 1;
    let transitions = (0..length - 1)
        .map(|h| {
            (0..states[h])
                .map(|s| {
                    let on = s == 0;
                    vec![
                        if on { vec![1.0 - slip, slip] } else { vec![0.0, 1.0] },
                        vec![0.0, 1.0],
                    ]
                })
                .collect()
        })
        .collect();
    let layout = Layout::new(states.clone(), 2);
    let reward = ActionTable::from_fn(&layout, |s, a| {
        if s.step == length - 1 && s.index == 0 && a == 0 {
            1.0
        } else {
            0.0
        }
    });
    Mdp::validate(MdpDocument {
        horizon: length,
        states_per_step: states,
        num_actions: 2,
        transitions,
        reward: reward.to_nested(),
        r_max: 1.0,
    })
    .expect("chain family is valid by construction")
}

/// Time-indexed grid: start in the corner `(0, 0)`, reward 1 for standing on
/// the opposite corner at the final step. Actions move right, up, left, down;
/// with probability `slip` the move is uniformly random instead.
pub fn gridworld(width: usize, height: usize, horizon: usize, slip: f64) -> Mdp {
    assert!(width >= 1 && height >= 1 && horizon >= 1);
    let cells = width * height;
    let goal = cells - 1;
    let moves: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];
    let step_to = |cell: usize, m: (i64, i64)| -> usize {
        let x = ((cell % width) as i64 + m.0).clamp(0, width as i64 - 1) as usize;
        let y = ((cell / width) as i64 + m.1).clamp(0, height as i64 - 1) as usize;
        y * width + x
    };
    let mut states = vec![cells; horizon];
    states[0] = 1;
    let cell_of = |h: usize, s: usize| if h == 0 { 0 } else { s };
    let transitions = (0..horizon - 1)
        .map(|h| {
            (0..states[h])
                .map(|s| {
                    let cell = cell_of(h, s);
                    (0..4)
                        .map(|a| {
                            let mut row = vec![0.0; cells];
                            row[step_to(cell, moves[a])] += 1.0 - slip;
                            for m in moves {
                                row[step_to(cell, m)] += slip / 4.0;
                            }
                            row
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let layout = Layout::new(states.clone(), 4);
    let reward = ActionTable::from_fn(&layout, |s, _| {
        if s.step == horizon - 1 && cell_of(s.step, s.index) == goal {
            1.0
        } else {
            0.0
        }
    });
    Mdp::validate(MdpDocument {
        horizon,
        states_per_step: states,
        num_actions: 4,
        transitions,
        reward: reward.to_nested(),
        r_max: 1.0,
    })
    .expect("gridworld family is valid by construction")
}

/// Random dense-or-sparse MDP; `sparsity` is the chance that a transition
/// entry or reward is zeroed. `r_max` is the exact largest trajectory total.
pub fn random(horizon: usize, states: usize, actions: usize, sparsity: f64, seed: u64) -> Mdp {
    assert!(horizon >= 1 && states >= 1 && actions >= 1);
    let mut rng = SeedStream::new(seed).child("mdp/random").rng();
    let mut per_step = vec![states; horizon];
    per_step[0] = 1;
    let transitions = (0..horizon - 1)
        .map(|h| {
            (0..per_step[h])
                .map(|_| {
                    (0..actions)
                        .map(|_| {
                            let n = per_step[h + 1];
                            let mut w: Vec<f64> = (0..n)
                                .map(|_| if rng.gen::<f64>() < sparsity { 0.0 } else { rng.gen_range(0.05..1.0) })
                                .collect();
                            if w.iter().all(|&x| x == 0.0) {
                                let k = rng.gen_range(0..n);
                                w[k] = 1.0;
                            }
                            let z: f64 = w.iter().sum();
                            w.iter_mut().for_each(|x| *x /= z);
                            w
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Vec<Vec<Vec<Vec<f64>>>>>();
    let layout = Layout::new(per_step.clone(), actions);
    let reward = ActionTable::from_fn(&layout, |_, _| {
        if rng.gen::<f64>() < sparsity {
            0.0
        } else {
            rng.gen::<f64>()
        }
    });
    let mut doc = MdpDocument {
        horizon,
        states_per_step: per_step,
        num_actions: actions,
        transitions,
        reward: reward.to_nested(),
        r_max: f64::INFINITY,
    };
    // r_max is declared as the tight bound; compute it on a provisional copy.
    doc.r_max = horizon as f64;
    let provisional = Mdp::validate(doc.clone()).expect("random family is valid by construction");
    doc.r_max = max_trajectory_reward(&provisional, provisional.true_reward()).0;
    Mdp::validate(doc).expect("random family is valid by construction")
}

/// `(1 - w) * uniform + w * pi*`: a reference policy whose informativeness
/// is the weight placed on the optimal policy of the true reward.
pub fn reference_policy(mdp: &Mdp, optimal_weight: f64) -> TabularPolicy {
    let star = optimal_policy(mdp, mdp.true_reward());
    TabularPolicy::uniform(mdp.layout()).blend(&star, optimal_weight)
}

/// Probability that [`reference_policy`] advances at an on-chain state.
pub fn chain_advance_probability(optimal_weight: f64) -> f64 {
    0.5 + 0.5 * optimal_weight
}

pub fn on_chain(step: usize) -> StateId {
    StateId::new(step, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::exact_value;

    #[test]
    fn bad_family_specs_are_errors() {
        assert!(FamilySpec::Chain { length: 0, slip: 0.0 }.try_build(0).is_err());
        assert!(FamilySpec::Chain { length: 3, slip: 1.5 }.try_build(0).is_err());
        assert!(FamilySpec::Random { horizon: 2, states: 0, actions: 2, sparsity: 0.0 }.try_build(0).is_err());
        assert!(FamilySpec::Gridworld { width: 2, height: 2, horizon: 3, slip: 0.1 }.try_build(0).is_ok());
    }

    #[test]
    fn chain_optimum_is_one() {
        for len in 1..6 {
            let mdp = chain(len, 0.0);
            let star = optimal_policy(&mdp, mdp.true_reward());
            assert_eq!(exact_value(&mdp, &star, mdp.true_reward()).value(), 1.0);
        }
    }

    #[test]
    fn reference_policy_value_on_chain() {
        let mdp = chain(8, 0.0);
        let sft = reference_policy(&mdp, 0.4);
        let p = chain_advance_probability(0.4);
        let v = exact_value(&mdp, &sft, mdp.true_reward()).value();
        assert!((v - p.powi(8)).abs() < 1e-12);
    }

    #[test]
    fn gridworld_goal_is_reachable() {
        let mdp = gridworld(3, 3, 5, 0.1);
        let star = optimal_policy(&mdp, mdp.true_reward());
        let v = exact_value(&mdp, &star, mdp.true_reward()).value();
        assert!(v > 0.5 && v <= 1.0, "{v}");
    }

    #[test]
    fn random_rmax_is_tight() {
        let mdp = random(4, 3, 2, 0.2, 1);
        assert_eq!(mdp.r_max(), max_trajectory_reward(&mdp, mdp.true_reward()).0);
    }

    #[test]
    fn family_spec_parses() {
        let spec: FamilySpec = serde_json::from_str(r#"{"family":"chain","length":8}"#).unwrap();
        assert_eq!(spec, FamilySpec::Chain { length: 8, slip: 0.0 });
        assert_eq!(spec.build(0).horizon(), 8);
    }
}
