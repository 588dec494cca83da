use std::io;
use std::time::Duration;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("endpoint `{endpoint}` failed: {message}")]
    Endpoint { endpoint: String, message: String },

    #[error("prompt of ~{tokens} tokens exceeds the {max_context}-token context of `{endpoint}`")]
    ContextOverflow {
        endpoint: String,
        tokens: usize,
        max_context: usize,
    },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("malformed model output: {0}")]
    Format(String),

    #[error("invalid JSON block: {0}")]
    Json(String),

    #[error("no definition of `{name}` found: {detail}")]
    Signature { name: String, detail: String },

    #[error("compilation failed")]
    Compile { log: String },

    #[error("timed out after {0:?}")]
    Timeout(Duration),

    #[error("program crashed ({status})")]
    RuntimeCrash { status: String, output: String },

    #[error("toolchain unavailable: {0}")]
    ToolchainUnavailable(String),

    #[error("region identification failed: {0}")]
    Region(String),

    #[error("span {start}..{end} out of range for {line_count} lines")]
    SpanOutOfRange {
        start: usize,
        end: usize,
        line_count: usize,
    },

    #[error("invalid region span set: {0}")]
    InvalidSpans(String),

    #[error("profile has no measurement for region `{0}`")]
    ProfileMissing(String),

    #[error("need at least {need} candidates, have {have}")]
    InsufficientCandidates { have: usize, need: usize },

    #[error("subsample target {target} exceeds the {available} available records")]
    TargetExceedsAvailable { target: usize, available: usize },

    #[error("interrupted")]
    Interrupted,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for the CLI. Classes: config=2, endpoint=3,
    /// toolchain=4, format=5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Endpoint { .. } | Error::ContextOverflow { .. } | Error::Generation(_) => 3,
            Error::Compile { .. }
            | Error::Timeout(_)
            | Error::RuntimeCrash { .. }
            | Error::ToolchainUnavailable(_)
            | Error::ProfileMissing(_) => 4,
            Error::Format(_)
            | Error::Json(_)
            | Error::Signature { .. }
            | Error::Region(_)
            | Error::SpanOutOfRange { .. }
            | Error::InvalidSpans(_) => 5,
            Error::InsufficientCandidates { .. }
            | Error::TargetExceedsAvailable { .. }
            | Error::Interrupted
            | Error::Io(_) => 1,
        }
    }

    pub(crate) fn endpoint(endpoint: &str, message: impl Into<String>) -> Self {
        Error::Endpoint {
            endpoint: endpoint.to_owned(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
