use std::path::PathBuf;

/// Errors surfaced by the simulator stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("CSIT quality {value} for pair (ue {ue}, rrh {rrh}) is outside [0, 1]")]
    InvalidCsitQuality { ue: usize, rrh: usize, value: f64 },

    #[error("channel draw for (ue {ue}, rrh {rrh}) stayed rank deficient after {retries} retries")]
    RankDeficient { ue: usize, rrh: usize, retries: usize },

    #[error("invalid stream split: {0}")]
    InvalidSplit(String),

    #[error("nullspace for ue {ue} has dimension {available}, need {required}")]
    NullspaceTooSmall { ue: usize, available: usize, required: usize },

    #[error("singular value decomposition did not converge")]
    SvdFailed,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("queue state {value} bits is outside [0, {max}]")]
    OutOfRange { value: f64, max: f64 },

    #[error("relative value iteration did not converge after {sweeps} sweeps (span {span:e})")]
    NotConverged { sweeps: usize, span: f64 },

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_frame(self, frame: u64) -> Self {
        Error::AtFrame {
            frame,
            source: Box::new(self),
        }
    }
}
