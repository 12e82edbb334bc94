use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_categorical, ActionTable, Mdp, StateId};
use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Step {
    pub state: StateId,
    pub action: usize,
}

impl Step {
    pub const fn new(state: StateId, action: usize) -> Self {
        Self { state, action }
    }
}

/// A full episode or a partial rollout from a reset point.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    start_step: usize,
    steps: Vec<Step>,
    stream: Option<u64>,
}

/// JSONL form: `{"start_step": 1, "steps": [[h, s, a], ...]}` with 1-based `h`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrajectoryRecord {
    start_step: usize,
    steps: Vec<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stream: Option<u64>,
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = String;

    fn try_from(rec: TrajectoryRecord) -> std::result::Result<Self, String> {
        if rec.start_step == 0 {
            return Err("start_step is 1-based".into());
        }
        let start = rec.start_step - 1;
        let steps = rec
            .steps
            .iter()
            .enumerate()
            .map(|(i, &[h, s, a])| {
                if h != rec.start_step + i {
                    Err(format!("step {i} has h={h}, expected {}", rec.start_step + i))
                } else {
                    Ok(Step::new(StateId::new(h - 1, s), a))
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if steps.is_empty() {
            return Err("empty trajectory".into());
        }
        Ok(Trajectory {
            start_step: start,
            steps,
            stream: rec.stream,
        })
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        TrajectoryRecord {
            start_step: t.start_step + 1,
            steps: t
                .steps
                .iter()
                .map(|st| [st.state.step + 1, st.state.index, st.action])
                .collect(),
            stream: t.stream,
        }
    }
}

impl Trajectory {
    pub fn new(start_step: usize, steps: Vec<Step>) -> Self {
        Self {
            start_step,
            steps,
            stream: None,
        }
    }

    pub fn with_stream(mut self, key: u64) -> Self {
        self.stream = Some(key);
        self
    }

    /// Zero-based step of the first pair.
    pub fn start_step(&self) -> usize {
        self.start_step
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn first(&self) -> Step {
        self.steps[0]
    }

    pub fn stream(&self) -> Option<u64> {
        self.stream
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_full(&self, horizon: usize) -> bool {
        self.start_step == 0 && self.steps.len() == horizon
    }

    pub fn total_reward(&self, reward: &ActionTable) -> f64 {
        self.steps.iter().map(|st| reward.get(st.state, st.action)).sum()
    }

    /// Checks step indices and that every transition has positive probability.
    pub fn check(&self, mdp: &Mdp) -> Result<()> {
        let bad = |reason: String| Error::InvalidMdp {
            location: "trajectory".into(),
            reason,
        };
        if self.steps.is_empty() || self.start_step + self.steps.len() != mdp.horizon() {
            return Err(bad(format!(
                "length {} from step {} does not reach horizon {}",
                self.steps.len(),
                self.start_step + 1,
                mdp.horizon()
            )));
        }
        for (i, st) in self.steps.iter().enumerate() {
            if st.state.step != self.start_step + i || !mdp.contains(st.state) || st.action >= mdp.num_actions() {
                return Err(bad(format!("step {i} ({}, a={}) is out of place", st.state, st.action)));
            }
            if let Some(next) = self.steps.get(i + 1) {
                if mdp.transition_prob(st.state, st.action, next.state.index) <= 0.0 {
                    return Err(bad(format!(
                        "{} a={} cannot reach {}",
                        st.state, st.action, next.state
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Start {
    Initial,
    Reset(StateId),
}

/// Takes `first_action` at `state`, then follows `policy` to the horizon.
pub fn rollout_from<R: Rng + ?Sized>(
    mdp: &Mdp,
    state: StateId,
    first_action: usize,
    policy: &TabularPolicy,
    rng: &mut R,
) -> Trajectory {
    let mut steps = Vec::with_capacity(mdp.horizon() - state.step);
    let mut s = state;
    let mut a = first_action;
    loop {
        steps.push(Step::new(s, a));
        match mdp.next_distribution(s, a) {
            Some(next) => {
                s = StateId::new(s.step + 1, sample_categorical(next, rng));
                a = sample_categorical(policy.row(s), rng);
            }
            None => break,
        }
    }
    Trajectory::new(state.step, steps)
}

/// Rolls `policy` from the initial state or a reset state to step `H`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &TabularPolicy,
    start: Start,
    rng: &mut R,
) -> Result<Trajectory> {
    let state = match start {
        Start::Initial => mdp.initial_state(),
        Start::Reset(s) if mdp.contains(s) => s,
        Start::Reset(s) => return Err(Error::UnknownState(s)),
    };
    let a = sample_categorical(policy.row(state), rng);
    Ok(rollout_from(mdp, state, a, policy, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::families::{chain, random};
    use crate::rng::SeedStream;

    #[test]
    fn reset_to_last_step_gives_one_pair() {
        let mdp = chain(2, 0.0);
        let pi = TabularPolicy::uniform(mdp.layout());
        let mut rng = SeedStream::new(0).rng();
        let t = sample_trajectory(&mdp, &pi, Start::Reset(StateId::new(1, 0)), &mut rng).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.start_step(), 1);
        t.check(&mdp).unwrap();
    }

    #[test]
    fn deterministic_path() {
        let mdp = chain(4, 0.0);
        let pi = TabularPolicy::deterministic(mdp.layout(), |_| 0);
        let mut rng = SeedStream::new(0).rng();
        let t = sample_trajectory(&mdp, &pi, Start::Initial, &mut rng).unwrap();
        assert!(t.is_full(4));
        assert!(t.steps().iter().all(|st| st.state.index == 0 && st.action == 0));
        assert_eq!(t.total_reward(mdp.true_reward()), 1.0);
    }

    #[test]
    fn same_stream_same_trajectory() {
        let mdp = random(5, 4, 3, 0.2, 3);
        let pi = TabularPolicy::uniform(mdp.layout());
        let key = SeedStream::new(42).child("x");
        let a = sample_trajectory(&mdp, &pi, Start::Initial, &mut key.rng()).unwrap();
        let b = sample_trajectory(&mdp, &pi, Start::Initial, &mut key.rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_reset_state() {
        let mdp = chain(2, 0.0);
        let pi = TabularPolicy::uniform(mdp.layout());
        let mut rng = SeedStream::new(0).rng();
        assert!(matches!(
            sample_trajectory(&mdp, &pi, Start::Reset(StateId::new(1, 5)), &mut rng),
            Err(Error::UnknownState(_))
        ));
        assert!(sample_trajectory(&mdp, &pi, Start::Reset(StateId::new(7, 0)), &mut rng).is_err());
    }

    #[test]
    fn jsonl_uses_one_based_steps() {
        let t = Trajectory::new(1, vec![Step::new(StateId::new(1, 0), 1)]).with_stream(9);
        let text = serde_json::to_string(&t).unwrap();
        assert_eq!(text, r#"{"start_step":2,"steps":[[2,0,1]],"stream":9}"#);
        let back: Trajectory = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Trajectory>(r#"{"start_step":1,"steps":[[2,0,1]]}"#).is_err());
    }
}
