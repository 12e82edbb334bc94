use std::path::PathBuf;

use thiserror::Error;

use crate::mdp::StateId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP at {location}: {reason}")]
    InvalidMdp { location: String, reason: String },

    #[error("trajectory {witness:?} totals {total} > r_max = {r_max}")]
    RewardExceedsRmax {
        total: f64,
        r_max: f64,
        witness: Vec<(StateId, usize)>,
    },

    #[error("state {0} does not exist in the MDP")]
    UnknownState(StateId),

    #[error("table shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid policy row at {state}: {reason}")]
    InvalidPolicy { state: StateId, reason: String },

    #[error("support violation at {location}: p puts mass {mass} on action {action} where q is zero")]
    SupportViolation {
        location: String,
        action: usize,
        mass: f64,
    },

    #[error("action {action} at {state} has zero probability under {which}")]
    ZeroProbabilityAction {
        state: StateId,
        action: usize,
        which: &'static str,
    },

    #[error("expected a full-horizon trajectory, got one starting at step {start_step}")]
    PartialTrajectory { start_step: usize },

    #[error("preference pair {index} has zero likelihood under the model")]
    InfiniteLoss { index: usize },

    #[error("link function: {0}")]
    InvalidLink(String),

    #[error("{count} trajectories exceed the enumeration cap of {cap}")]
    EnumerationInfeasible { count: usize, cap: usize },

    #[error("coverage violation: {0}")]
    CoverageViolation(String),

    #[error("unnormalized mass underflows to zero at {0}")]
    Underflow(StateId),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("missing input: {0}")]
    MissingInput(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("hash mismatch for {path}: manifest says {expected}, file has {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("no manifest in {0}; the directory is incomplete")]
    MissingManifest(PathBuf),

    #[error("{path}:{line}: {source}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }
}
