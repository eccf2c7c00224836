//! Proto-value networks at desk scale: tabular successor-measure oracles,
//! indicator-function auxiliary tasks, a small MLP encoder trained by TD on
//! those tasks, and a linear Q-learning agent on the frozen features.

pub mod agent;
pub mod analysis;
pub mod error;
pub mod experiment;
pub mod indicators;
pub mod linalg;
pub mod mdp;
pub mod nn;
pub mod store;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
