use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the model core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index error: {what} id {index} out of range for size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;
