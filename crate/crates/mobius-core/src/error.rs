//! Error type shared across the engine.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MobiusError>;

#[derive(Error, Debug)]
pub enum MobiusError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Non-finite values abort the step; `node` is the id the offending op
    /// would have received on the tape.
    #[error("non-finite value in {what} (node {node:?})")]
    NonFinite { what: String, node: Option<usize> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown parameter name(s): {0}")]
    UnknownParam(String),

    #[error("timestep {t} out of range (schedule has T={max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("loss node output has shape {shape:?}, expected a scalar")]
    LossNotScalar { shape: Vec<usize> },

    #[error("model closure is not deterministic: {first} vs {second}")]
    NonDeterministicClosure { first: f64, second: f64 },

    #[error("training aborted at step {step}: {reason}")]
    TrainAbort { step: usize, reason: String },

    #[error("benchmark guard: {0}")]
    BenchGuard(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl MobiusError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MobiusError::Io {
            path: path.into(),
            source,
        }
    }
}
