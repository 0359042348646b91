use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("config error in {op}: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("degenerate input in {op}: {msg}")]
    Degenerate { op: &'static str, msg: String },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn dim_err<T>(op: &'static str, left: &[usize], right: &[usize]) -> Result<T> {
    Err(AutodiffError::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    })
}
