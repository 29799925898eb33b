use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    /// A forward quantity left the finite range. `layer` is the zero-based
    /// index of the layer whose output first became non-finite.
    #[error("numerical overflow at layer {layer}: {detail}")]
    Overflow { layer: usize, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate:e}, relative change {change:e})")]
    NonConvergence {
        iterations: usize,
        estimate: f64,
        change: f64,
    },

    #[error("non-finite value in gradient block {block}")]
    NonFiniteGradient { block: usize },

    #[error("training aborted at step {step}: {reason}")]
    NumericAbort { step: usize, reason: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True for failures caused by the numbers themselves rather than the
    /// caller's setup (overflow, non-finite losses, diverging iterations).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Overflow { .. }
                | Error::NonFiniteGradient { .. }
                | Error::NumericAbort { .. }
                | Error::NonConvergence { .. }
        )
    }
}
