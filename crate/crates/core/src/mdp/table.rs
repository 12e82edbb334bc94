use serde::{Deserialize, Serialize};

use super::StateId;
use crate::error::{Error, Result};

/// Shape of a per-step state space with a shared action set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    states_per_step: Vec<usize>,
    num_actions: usize,
}

impl Layout {
    pub fn new(states_per_step: Vec<usize>, num_actions: usize) -> Self {
        Self {
            states_per_step,
            num_actions,
        }
    }

    pub fn horizon(&self) -> usize {
        self.states_per_step.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn states_at(&self, step: usize) -> usize {
        self.states_per_step[step]
    }

    pub fn states_per_step(&self) -> &[usize] {
        &self.states_per_step
    }

    pub fn contains(&self, state: StateId) -> bool {
        state.step < self.horizon() && state.index < self.states_per_step[state.step]
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.states_per_step
            .iter()
            .enumerate()
            .flat_map(|(h, &n)| (0..n).map(move |s| StateId::new(h, s)))
    }

    pub fn num_states(&self) -> usize {
        self.states_per_step.iter().sum()
    }
}

/// A value per `(state, action)`, stored as `[step][state][action]`.
///
/// Used for rewards, Q-functions, visitation measures and policy rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionTable(Vec<Vec<Vec<f64>>>);

impl ActionTable {
    pub fn filled(layout: &Layout, value: f64) -> Self {
        Self(
            layout
                .states_per_step()
                .iter()
                .map(|&n| vec![vec![value; layout.num_actions()]; n])
                .collect(),
        )
    }

    pub fn zeros(layout: &Layout) -> Self {
        Self::filled(layout, 0.0)
    }

    pub fn from_fn(layout: &Layout, mut f: impl FnMut(StateId, usize) -> f64) -> Self {
        let mut t = Self::zeros(layout);
        for s in layout.states() {
            for (a, v) in t.row_mut(s).iter_mut().enumerate() {
                *v = f(s, a);
            }
        }
        t
    }

    pub fn from_nested(values: Vec<Vec<Vec<f64>>>) -> Self {
        Self(values)
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.clone()
    }

    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        if self.0.len() != layout.horizon() {
            return Err(Error::ShapeMismatch(format!(
                "table has {} steps, layout has {}",
                self.0.len(),
                layout.horizon()
            )));
        }
        for (h, step) in self.0.iter().enumerate() {
            if step.len() != layout.states_at(h) {
                return Err(Error::ShapeMismatch(format!(
                    "step {} has {} states, expected {}",
                    h + 1,
                    step.len(),
                    layout.states_at(h)
                )));
            }
            if let Some(s) = step.iter().position(|row| row.len() != layout.num_actions()) {
                return Err(Error::ShapeMismatch(format!(
                    "state (h={}, s={s}) has {} actions, expected {}",
                    h + 1,
                    step[s].len(),
                    layout.num_actions()
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(
            self.0.iter().map(Vec::len).collect(),
            self.0.first().and_then(|s| s.first()).map_or(0, Vec::len),
        )
    }

    pub fn row(&self, state: StateId) -> &[f64] {
        &self.0[state.step][state.index]
    }

    pub fn row_mut(&mut self, state: StateId) -> &mut [f64] {
        &mut self.0[state.step][state.index]
    }

    pub fn get(&self, state: StateId, action: usize) -> f64 {
        self.0[state.step][state.index][action]
    }

    pub fn set(&mut self, state: StateId, action: usize, value: f64) {
        self.0[state.step][state.index][action] = value;
    }

    pub fn step(&self, step: usize) -> &[Vec<f64>] {
        &self.0[step]
    }

    pub fn step_mut(&mut self, step: usize) -> &mut [Vec<f64>] {
        &mut self.0[step]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = (StateId, &[f64])> + '_ {
        self.0.iter().enumerate().flat_map(|(h, step)| {
            step.iter()
                .enumerate()
                .map(move |(s, row)| (StateId::new(h, s), row.as_slice()))
        })
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flatten().flatten().copied()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|step| step.iter().map(|row| row.iter().map(|&v| f(v)).collect()).collect())
                .collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A value per state, stored as `[step][state]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateTable(Vec<Vec<f64>>);

impl StateTable {
    pub fn zeros(layout: &Layout) -> Self {
        Self(layout.states_per_step().iter().map(|&n| vec![0.0; n]).collect())
    }

    pub fn get(&self, state: StateId) -> f64 {
        self.0[state.step][state.index]
    }

    pub fn set(&mut self, state: StateId, value: f64) {
        self.0[state.step][state.index] = value;
    }

    pub fn step(&self, step: usize) -> &[f64] {
        &self.0[step]
    }

    pub fn step_mut(&mut self, step: usize) -> &mut [f64] {
        &mut self.0[step]
    }
}
