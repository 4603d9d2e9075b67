use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("step index {t} outside the valid range {range}")]
    Domain { t: usize, range: String },

    #[error("operation `{op}` is not supported by the {kind} operator")]
    Unsupported { op: &'static str, kind: String },

    /// Conjugate-gradient curvature vanished. `trace` holds residual norms per iteration.
    #[error("conjugate gradient breakdown at iteration {iteration} (curvature {curvature:e})")]
    Breakdown {
        iteration: usize,
        curvature: f64,
        trace: Vec<f64>,
    },

    /// Loss or state became non-finite. `last_finite` carries the last usable iterate.
    #[error("non-finite value encountered: {context}")]
    NonFinite {
        context: String,
        last_finite: Option<Vec<f64>>,
    },

    #[error("at step t={t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    /// An internal cross-check between two independent routes disagreed.
    #[error("{what} check failed: error {error:e} exceeds {tol:e}")]
    CheckFailed {
        what: &'static str,
        error: f64,
        tol: f64,
    },

    #[error("configuration error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("corrupt tensor file: {0}")]
    CorruptTensor(String),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(expected: usize, got: usize, context: &'static str) -> Self {
        Error::DimensionMismatch {
            expected,
            got,
            context,
        }
    }

    pub(crate) fn at_step(self, t: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                t,
                source: Box::new(e),
            },
        }
    }
}
