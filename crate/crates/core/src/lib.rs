//! Tabular laboratory for dataset-reset policy optimization (DR-PO) from
//! preference feedback.
//!
//! The crate simulates episodic finite MDPs with the ability to reset to any
//! state, generates Bradley-Terry labeled preference data from a reference
//! policy, learns rewards by maximum likelihood, and runs the dataset-reset
//! training loops (closed-form KL-regularized mirror descent and a clipped
//! PPO-style update) next to their no-reset baselines. Every quantity in the
//! accompanying guarantees (concentrability coefficients, the suboptimality
//! bound, the performance-difference identity, ...) can be computed exactly
//! by enumeration at desk scale.

pub mod driver;
pub mod error;
pub mod experiment;
pub mod io;
pub mod mdp;
pub mod mirror_descent;
pub mod persist;
pub mod policy;
pub mod preference;
pub mod regression;
pub mod reward;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use mdp::{ActionTable, Layout, Mdp, StateId, Trajectory};
pub use policy::{MixturePolicy, TabularPolicy};
pub use rng::SeedStream;
