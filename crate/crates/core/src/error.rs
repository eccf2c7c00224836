use thiserror::Error;

use crate::store::{Checkpoint, StoreError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite parameter in layer {layer}")]
    NonFiniteParameter { layer: usize },

    /// Training produced a NaN/Inf loss. Carries the last checkpoint whose
    /// loss was finite.
    #[error("non-finite loss at step {step}")]
    Diverged {
        step: u64,
        last_good: Box<Checkpoint>,
    },

    #[error("missing runs: {}", .0.join(", "))]
    MissingRuns(Vec<String>),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
