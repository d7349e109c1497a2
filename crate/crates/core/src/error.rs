use std::path::PathBuf;

use crate::netcore::FilterRef;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),
    #[error("masking would leave layer {layer} without alive filters")]
    EmptyLayer { layer: usize },
    #[error("invalid candidate {0:?}: filter is not alive or out of range")]
    InvalidCandidate(FilterRef),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in batch {batch}: {what}")]
    NumericFailure { batch: usize, what: String },
    #[error("structural error: {0}")]
    Structural(String),
    #[error("class {class} has {available} examples, {required} required")]
    InsufficientData { class: usize, available: usize, required: usize },
    #[error("knowledge snapshot does not cover example {0}")]
    Coverage(usize),
    #[error("search is stuck: no layer can lose filters without emptying it")]
    SearchStuck,
    #[error("target reduction rate {target} is infeasible (reachable maximum {reachable:.4})")]
    InfeasibleTarget { target: f64, reachable: f64 },
    #[error("no interim sub-networks to select teachers from")]
    NoTeachers,
    #[error("inference failed for teacher {teacher} at batch {batch}: {reason}")]
    TeacherInference { teacher: usize, batch: usize, reason: String },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("correlation undefined: zero variance")]
    UndefinedCorrelation,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("phase `{phase}` failed: {source}")]
    Phase {
        phase: String,
        #[source]
        source: Box<Error>,
    },
    #[error("run directory {0} is locked by another pipeline")]
    Locked(PathBuf),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Attach a path to `std::io` results.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
