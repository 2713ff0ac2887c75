use std::path::PathBuf;

use thiserror::Error;

use crate::dynamics::Trajectory;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("integration blew up at step {step}")]
    IntegrationBlowup {
        step: usize,
        partial: Box<Trajectory>,
    },

    #[error("control enters the barrier derivative at order {order}, before relative degree {relative_degree}")]
    Structural {
        order: usize,
        relative_degree: usize,
    },

    #[error("relative degree mismatch: barrier has degree {0}")]
    RelativeDegree(usize),

    #[error("matrix not positive definite after jitter escalation up to {jitter:e}")]
    Conditioning { jitter: f64 },

    #[error("safety constraint is infeasible: {0}")]
    Infeasible(String),

    #[error("solver stalled after {iterations} iterations (gap {gap:e})")]
    SolverStall {
        iterations: usize,
        gap: f64,
        iterate: Vec<f64>,
    },

    #[error("probability {0} outside (0, 1)")]
    Probability(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint verification failed: {0}")]
    Checkpoint(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
