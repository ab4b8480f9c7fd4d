//! Crate-wide error type.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced anywhere in the protocol stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not line up for the attempted operation.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Invalid model or experiment configuration.
    Config(String),
    /// Invalid data fed into an operation (bad label, empty dataset, ...).
    Data(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
    /// An operation was called outside its contract (e.g. backward on a
    /// non-scalar output).
    Contract(String),
    /// Malformed wire frame or checkpoint blob; `offset` is the byte position
    /// at which decoding failed.
    Protocol { offset: usize, detail: String },
    /// Backbone warmup finished below the required zero-shot accuracy.
    Warmup {
        accuracy: f64,
        required: f64,
        domain: usize,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Data(msg) => write!(f, "invalid data: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Protocol { offset, detail } => {
                write!(f, "protocol error at byte {offset}: {detail}")
            }
            Error::Warmup {
                accuracy,
                required,
                domain,
            } => write!(
                f,
                "warmup produced zero-shot accuracy {accuracy:.4} < {required:.4} on domain \
                 {domain}; increase warmup steps or pool size"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
