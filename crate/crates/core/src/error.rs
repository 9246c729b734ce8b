use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a precondition (shape, range, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward computation produced NaN or infinity.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("sampler diverged at step {step}: |v| = {norm:.3e}")]
    SamplerDivergence { step: usize, norm: f64 },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checksum mismatch: manifest records {recorded}, payload hashes to {actual}")]
    Checksum { recorded: String, actual: String },

    #[error("training aborted: {term} loss is not finite ({value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("invalid config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
