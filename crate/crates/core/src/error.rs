use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("state {state} out of range (0..{n})")]
    StateOutOfRange { state: usize, n: usize },

    #[error("power iteration did not converge within {iterations} iterations (last change {last_change:e})")]
    PowerIterationCap { iterations: usize, last_change: f64 },

    #[error("states {0:?} have zero visitation mass but positive inflow")]
    ZeroVisitation(Vec<usize>),

    #[error(
        "fixpoint iteration did not converge within {iterations} sweeps (residual {residual:e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("linear system is singular")]
    Singular,

    #[error("conditioning event S_{t} = {state} has zero probability")]
    ZeroProbabilityEvent { state: usize, t: usize },

    #[error("enumeration exceeded the cap of {cap} weighted paths")]
    EnumerationCap { cap: usize },

    #[error("horizon {horizon} leaves tail mass {tail:e} (need < 1e-10)")]
    HorizonTooShort { horizon: usize, tail: f64 },

    #[error("unknown target kind `{0}`")]
    UnknownTarget(String),

    #[error("target `{0}` needs the previous transition, which is not available")]
    MissingPredecessor(&'static str),

    #[error("missing recorded gradient for past step {0}")]
    MissingGradient(usize),

    #[error("no stale-gradient exhibit found in seeds {start}..{end}; widen the range")]
    NoExhibit { start: u64, end: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
