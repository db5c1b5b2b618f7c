use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("propagation produced a non-finite value at state index {index}")]
    PropagationFailure { index: usize },

    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),

    #[error("measurement from sensor `{sensor}` contains a non-finite value at index {index}")]
    NonFiniteMeasurement { sensor: String, index: usize },

    #[error("measurement from sensor `{sensor}` rejected: {reason}")]
    InvalidMeasurement { sensor: String, reason: String },

    #[error("IMU sample at t={time} contains a non-finite value")]
    NonFiniteImu { time: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("adaptation not ready: {0}")]
    AdaptationNotReady(&'static str),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("event at t={time} is older than the latest processed time {latest}")]
    OutOfOrder { time: f64, latest: f64 },

    #[error("unknown sensor id `{0}`")]
    UnknownSensor(String),

    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dataset(line: usize, reason: impl Into<String>) -> Self {
        Error::Dataset {
            line,
            reason: reason.into(),
        }
    }

    /// True for errors caused by user-supplied configuration.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
