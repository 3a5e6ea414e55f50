use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("infeasible CTC target: sequence length {seq_len} is shorter than the {min_len} frames required")]
    Infeasible { seq_len: usize, min_len: usize },

    #[error("brute-force CTC search space {paths} exceeds the budget of {budget} paths")]
    SearchSpace { paths: f64, budget: f64 },

    #[error("pairing error: {segments} logit segments but {targets} line targets")]
    Pairing { segments: usize, targets: usize },

    #[error("{path}: unknown symbol {symbol:?} not in alphabet")]
    UnknownSymbol { path: PathBuf, symbol: char },

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
