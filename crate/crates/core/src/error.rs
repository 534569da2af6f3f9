use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Generation or experiment parameters that cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// One or more config invariants failed; every violation is listed.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("unknown instruction id `{0}`")]
    UnknownInstruction(String),

    #[error("step called on a finished episode for instruction `{0}`")]
    StepAfterDone(String),

    /// Action whose verb does not belong to the environment's vocabulary.
    #[error("illegal action `{action}` for {env} environment")]
    IllegalAction { action: String, env: &'static str },

    /// A trajectory did not replay against its environment.
    #[error("replay mismatch for `{instruction_id}` at step {step}: {detail}")]
    Replay {
        instruction_id: String,
        step: usize,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in {phase} (epoch {epoch}, batch {batch}): {detail}")]
    Divergence {
        phase: String,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("{0}")]
    Internal(String),

    #[error("parse error in {path} line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("corrupt record in {path} line {line}: {detail}")]
    Corruption {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("format mismatch in {path}: expected `{expected}`, found `{found}`")]
    Format {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
