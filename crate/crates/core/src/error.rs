use thiserror::Error;

/// Errors raised by the simulation, learning and evaluation pipeline.
#[derive(Debug, Error)]
pub enum FlockError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {what} (step {step}, agent {agent})")]
    NonFinite {
        what: &'static str,
        step: usize,
        agent: usize,
    },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    #[error("insufficient graph history: need {needed} graphs, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("agent index {index} out of range for {n} agents")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("initialization failed after {attempts} attempts: {last}")]
    InitExhausted { attempts: usize, last: String },

    #[error("protocol error at agent {agent}: {reason}")]
    Protocol { agent: usize, reason: String },

    #[error("distributed aggregation diverged from centralized at step {step}: max abs error {error:e}")]
    DistributedMismatch { step: usize, error: f64 },

    #[error("trajectory {trajectory} aborted: {source}")]
    TrajectoryAborted {
        trajectory: usize,
        source: Box<FlockError>,
    },

    #[error("model format: {0}")]
    ModelFormat(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("training diverged at round {round}: loss is {loss}")]
    Diverged { round: usize, loss: f64 },

    #[error("no trained model for K={k}{detail}")]
    MissingModel { k: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = FlockError> = std::result::Result<T, E>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> FlockError {
    FlockError::InvalidParam {
        field,
        reason: reason.into(),
    }
}
