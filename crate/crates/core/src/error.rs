use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("degenerate alpha gradient (norm {norm:e})")]
    DegenerateGradient { norm: f64 },

    #[error("non-finite value at tape node {node}")]
    NonFinite { node: usize },

    #[error("non-finite {what}")]
    Numeric { what: String },

    #[error("tape state error: {0}")]
    TapeState(&'static str),

    #[error("negative density {0} violates the input contract")]
    NegativeDensity(f64),

    #[error("weights sum to {0:e}; concentration undefined")]
    UndefinedConcentration(f64),

    #[error("all densities are zero; weighted depth undefined")]
    UndefinedDepth,

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
