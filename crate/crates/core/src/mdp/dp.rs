use serde::{Deserialize, Serialize};

use super::{ActionTable, Mdp, StateId, StateTable};
use crate::policy::TabularPolicy;

/// `d^pi_h(s, a)` for every step, together with the state marginals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitationMeasure {
    state: StateTable,
    state_action: ActionTable,
}

impl VisitationMeasure {
    pub fn state(&self, s: StateId) -> f64 {
        self.state.get(s)
    }

    pub fn state_action(&self, s: StateId, a: usize) -> f64 {
        self.state_action.get(s, a)
    }

    pub fn states(&self) -> &StateTable {
        &self.state
    }

    pub fn table(&self) -> &ActionTable {
        &self.state_action
    }
}

/// Forward dynamic program for the visitation measure of `policy`.
pub fn exact_visitation(mdp: &Mdp, policy: &TabularPolicy) -> VisitationMeasure {
    let layout = mdp.layout();
    let mut state = StateTable::zeros(layout);
    let mut state_action = ActionTable::zeros(layout);
    state.set(mdp.initial_state(), 1.0);
    for h in 0..mdp.horizon() {
        for s in 0..mdp.states_at(h) {
            let sid = StateId::new(h, s);
            let ds = state.get(sid);
            if ds == 0.0 {
                continue;
            }
            for (a, &p) in policy.row(sid).iter().enumerate() {
                let dsa = ds * p;
                state_action.set(sid, a, dsa);
                if dsa == 0.0 {
                    continue;
                }
                if let Some(next) = mdp.next_distribution(sid, a) {
                    let dnext = state.step_mut(h + 1);
                    for (sp, &q) in next.iter().enumerate() {
                        dnext[sp] += dsa * q;
                    }
                }
            }
        }
    }
    VisitationMeasure {
        state,
        state_action,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    pub v: StateTable,
    pub q: ActionTable,
}

impl ValueTables {
    /// `V(s_1)`.
    pub fn value(&self) -> f64 {
        self.v.get(StateId::new(0, 0))
    }
}

fn expected_next(mdp: &Mdp, s: StateId, a: usize, v: &StateTable) -> f64 {
    mdp.next_distribution(s, a).map_or(0.0, |next| {
        next.iter()
            .zip(v.step(s.step + 1))
            .map(|(p, v)| p * v)
            .sum()
    })
}

/// Backward recursion `Q(s,a) = r(s,a) + E[V(s')]`, `V(s) = <pi(s), Q(s,.)>`.
pub fn exact_value(mdp: &Mdp, policy: &TabularPolicy, reward: &ActionTable) -> ValueTables {
    let layout = mdp.layout();
    let mut v = StateTable::zeros(layout);
    let mut q = ActionTable::zeros(layout);
    for h in (0..mdp.horizon()).rev() {
        for s in 0..mdp.states_at(h) {
            let sid = StateId::new(h, s);
            let mut vs = 0.0;
            for a in 0..mdp.num_actions() {
                let qa = reward.get(sid, a) + expected_next(mdp, sid, a, &v);
                q.set(sid, a, qa);
                vs += policy.prob(sid, a) * qa;
            }
            v.set(sid, vs);
        }
    }
    ValueTables { v, q }
}

/// Deterministic backward-induction optimum; ties go to the lowest action.
pub fn optimal_policy(mdp: &Mdp, reward: &ActionTable) -> TabularPolicy {
    let layout = mdp.layout();
    let mut v = StateTable::zeros(layout);
    let mut choice = vec![Vec::new(); mdp.horizon()];
    for h in (0..mdp.horizon()).rev() {
        choice[h] = vec![0; mdp.states_at(h)];
        for s in 0..mdp.states_at(h) {
            let sid = StateId::new(h, s);
            let mut best = f64::NEG_INFINITY;
            for a in 0..mdp.num_actions() {
                let qa = reward.get(sid, a) + expected_next(mdp, sid, a, &v);
                if qa > best {
                    best = qa;
                    choice[h][s] = a;
                }
            }
            v.set(sid, best);
        }
    }
    TabularPolicy::deterministic(layout, |s| choice[s.step][s.index])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::families::{chain, random};
    use crate::mdp::{enumerate_trajectories, sample_trajectory, Start};
    use crate::rng::SeedStream;
    use rand::Rng;

    fn random_policy(mdp: &Mdp, seed: u64) -> TabularPolicy {
        let mut rng = SeedStream::new(seed).rng();
        let table = ActionTable::from_fn(mdp.layout(), |_, _| rng.gen_range(0.01..1.0));
        let mut t = table.clone();
        for (s, row) in table.iter_rows() {
            let z: f64 = row.iter().sum();
            t.row_mut(s).iter_mut().for_each(|p| *p /= z);
        }
        TabularPolicy::new(t).unwrap()
    }

    #[test]
    fn chain2_visitation() {
        let mdp = chain(2, 0.0);
        let det = TabularPolicy::deterministic(mdp.layout(), |_| 0);
        let d = exact_visitation(&mdp, &det);
        assert_eq!(d.state_action(StateId::new(1, 0), 0), 1.0);
        assert_eq!(d.state_action(StateId::new(1, 0), 1), 0.0);
        assert_eq!(d.state(StateId::new(1, 1)), 0.0);

        let uniform = TabularPolicy::uniform(mdp.layout());
        let d = exact_visitation(&mdp, &uniform);
        assert_eq!(d.state_action(StateId::new(1, 0), 0), 0.25);
    }

    #[test]
    fn visitation_flow_conservation() {
        let mdp = random(4, 3, 3, 0.3, 5);
        let pi = random_policy(&mdp, 9);
        let d = exact_visitation(&mdp, &pi);
        for h in 0..mdp.horizon() {
            let total: f64 = d.table().step(h).iter().flatten().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
        for h in 1..mdp.horizon() {
            for s in 0..mdp.states_at(h) {
                let inflow: f64 = (0..mdp.states_at(h - 1))
                    .flat_map(|sp| (0..mdp.num_actions()).map(move |a| (sp, a)))
                    .map(|(sp, a)| {
                        let prev = StateId::new(h - 1, sp);
                        d.state_action(prev, a) * mdp.transition_prob(prev, a, s)
                    })
                    .sum();
                let here: f64 = d.table().row(StateId::new(h, s)).iter().sum();
                assert!((inflow - here).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn visitation_matches_monte_carlo() {
        let mdp = random(3, 3, 2, 0.2, 21);
        let pi = random_policy(&mdp, 4);
        let d = exact_visitation(&mdp, &pi);
        let n = 100_000;
        let mut counts = ActionTable::zeros(mdp.layout());
        let mut rng = SeedStream::new(99).rng();
        for _ in 0..n {
            let t = sample_trajectory(&mdp, &pi, Start::Initial, &mut rng).unwrap();
            for st in t.steps() {
                counts.set(st.state, st.action, counts.get(st.state, st.action) + 1.0);
            }
        }
        for (s, row) in d.table().iter_rows() {
            for (a, &p) in row.iter().enumerate() {
                let freq = counts.get(s, a) / n as f64;
                let sigma = (p * (1.0 - p) / n as f64).sqrt();
                assert!((freq - p).abs() <= 3.0 * sigma + 1e-12, "{s} a={a}: {freq} vs {p}");
            }
        }
    }

    #[test]
    fn chain2_values() {
        let mdp = chain(2, 0.0);
        let r = mdp.true_reward();
        let good = TabularPolicy::deterministic(mdp.layout(), |_| 0);
        assert_eq!(exact_value(&mdp, &good, r).value(), 1.0);
        let left = TabularPolicy::deterministic(mdp.layout(), |s| if s.step == 0 { 1 } else { 0 });
        assert_eq!(exact_value(&mdp, &left, r).value(), 0.0);
    }

    #[test]
    fn value_matches_enumeration() {
        for seed in 0..20 {
            let mdp = random(3, 3, 3, 0.3, seed);
            let pi = random_policy(&mdp, seed + 100);
            let r = mdp.true_reward();
            let dp = exact_value(&mdp, &pi, r).value();
            let en: f64 = enumerate_trajectories(&mdp, &pi)
                .unwrap()
                .iter()
                .map(|(t, p)| p * t.total_reward(r))
                .sum();
            assert!((dp - en).abs() < 1e-10, "seed {seed}: {dp} vs {en}");
        }
    }

    #[test]
    fn optimal_policy_examples() {
        let mdp = chain(2, 0.0);
        let star = optimal_policy(&mdp, mdp.true_reward());
        assert_eq!(star.prob(StateId::new(0, 0), 0), 1.0);
        assert_eq!(star.prob(StateId::new(1, 0), 0), 1.0);
        assert_eq!(exact_value(&mdp, &star, mdp.true_reward()).value(), 1.0);

        let zero = ActionTable::zeros(mdp.layout());
        let ties = optimal_policy(&mdp, &zero);
        for s in mdp.layout().states() {
            assert_eq!(ties.prob(s, 0), 1.0);
        }
    }

    #[test]
    fn optimal_beats_random_policies() {
        let mdp = random(4, 3, 3, 0.3, 77);
        let r = mdp.true_reward();
        let best = exact_value(&mdp, &optimal_policy(&mdp, r), r).value();
        for i in 0..1000 {
            let v = exact_value(&mdp, &random_policy(&mdp, i), r).value();
            assert!(best >= v - 1e-12);
        }
    }
}
