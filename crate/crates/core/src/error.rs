use std::io;
use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped into the categories the command-line front end maps
/// onto exit codes; see [`Error::category`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("layout error: missing {}", .0.display())]
    Layout(PathBuf),

    #[error("cannot decode image {}: {msg}", .path.display())]
    Decode { path: PathBuf, msg: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("state error: {0}")]
    State(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("refusing to run: {0}")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Input,
    Numeric,
    Calibration,
    Other,
}

impl ErrorCategory {
    /// Process exit status for this class. 0 is reserved for success.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Other => 1,
            ErrorCategory::Config => 2,
            ErrorCategory::Input => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Calibration => 5,
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Generation(_) | Error::Refused(_) => ErrorCategory::Config,
            Error::Input(_)
            | Error::Layout(_)
            | Error::Decode { .. }
            | Error::Lookup(_)
            | Error::Contract(_)
            | Error::Format(_) => ErrorCategory::Input,
            Error::Numeric(_) | Error::Training { .. } => ErrorCategory::Numeric,
            Error::Calibration(_) => ErrorCategory::Calibration,
            Error::State(_) | Error::Evaluation(_) | Error::Io(_) => ErrorCategory::Other,
        }
    }
}
