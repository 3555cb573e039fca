use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("index {index} out of range 0..={max}")]
    Range { index: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("reward shaping violated: {0}")]
    Shaping(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot sample from an empty replay buffer")]
    EmptyBuffer,

    #[error("oracle generation failed: {0}")]
    Generation(String),

    #[error("corrupted trajectory data: {0}")]
    Data(String),

    #[error("environment is not enumerable: {0}")]
    Unsupported(String),

    #[error("trajectory tree too large: more than {limit} trajectories")]
    TooLarge { limit: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
