use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(String),
    #[error("matrix is not a rotation (orthonormality residual {residual:.3e})")]
    NotARotation { residual: f64 },
    #[error("point is behind the camera (z = {z:.3e})")]
    BehindCamera { z: f64 },
    #[error("bounding box side must be positive, got {side}")]
    EmptyBox { side: f64 },
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sequence too short: need at least {min} frames, got {got}")]
    SequenceTooShort { min: usize, got: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("objective is not finite{}", .frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
    NonFiniteObjective { frame: Option<usize> },
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("partner exchange timed out at stage {stage}")]
    ExchangeTimeout { stage: u8 },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Numerical failures (as opposed to malformed input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateRotation(_)
                | Error::NotARotation { .. }
                | Error::BehindCamera { .. }
                | Error::NonFiniteObjective { .. }
        )
    }

    pub(crate) fn shape(what: &'static str, expected: usize, got: usize) -> Self {
        Error::ShapeMismatch {
            what,
            expected,
            got,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Dataset(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
