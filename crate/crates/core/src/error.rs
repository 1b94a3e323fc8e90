use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate transfer function: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unstable system: {0}")]
    Unstable(String),

    #[error("impulse response of {what} does not decay within {max_len} taps")]
    NonDecaying { what: String, max_len: usize },

    #[error("insufficient excitation: regressor has numerical rank {rank} < order {order}")]
    InsufficientExcitation { rank: usize, order: usize },

    #[error("insufficient data: N = {samples} must exceed n + 1 = {}", order + 1)]
    InsufficientData { samples: usize, order: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "scenario sampling acceptance rate {rate:.3e} is below {min:.0e}; the uncertainty radius is likely misconfigured"
    )]
    LowAcceptance { rate: f64, min: f64 },

    #[error("criterion is rank deficient: basis columns {0:?} are linearly dependent on the others")]
    RankDeficientBasis(Vec<usize>),

    #[error("scenario {index}: {source}")]
    Scenario {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed data at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line,
                message: format!("{other:?}"),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
