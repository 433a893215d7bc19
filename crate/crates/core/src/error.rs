use thiserror::Error;

/// Errors raised anywhere in the inversion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("coefficient must be strictly positive, found {value} at {location}")]
    NonPositiveCoefficient { value: f64, location: String },

    #[error("fractional order {0} is outside (0, 1)")]
    InvalidGamma(f64),

    #[error("sensor ({x}, {y}) lies outside the domain")]
    SensorOutsideDomain { x: f64, y: f64 },

    #[error("observation time {time} is outside (0, {end}]")]
    TimeOutOfRange { time: f64, end: f64 },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("rank-deficient least-squares matrix (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("optimization diverged: residual grew for {0} consecutive iterations")]
    Diverged(usize),

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("multi-index set size overflows for degree {degree} in dimension {dim}")]
    IndexOverflow { degree: usize, dim: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Configuration problems, including those surfacing inside a stage.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
