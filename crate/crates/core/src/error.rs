//! Shared error type for the whole crate.

use thiserror::Error;

/// Errors raised by the numerical and IO layers.
#[derive(Error, Debug)]
pub enum Error {
    /// A vector that must be normalizable has norm below the degeneracy
    /// threshold (1e-12). The payload names the offending class where one
    /// exists, `None` for free-standing vectors.
    #[error("vector norm below 1e-12{}", .0.map(|c| format!(" (class {c})")).unwrap_or_default())]
    ZeroVector(Option<usize>),

    /// Operands disagree on dimension.
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),

    /// A class has no rows in an embedding matrix.
    #[error("class {0} has no samples")]
    EmptyClass(usize),

    /// Neighbor count outside [1, classes - 1].
    #[error("invalid neighbor count K={k} for {classes} classes")]
    BadK { k: usize, classes: usize },

    /// Iterative routine exceeded its iteration budget.
    #[error("power iteration did not converge within {0} iterations")]
    DidNotConverge(usize),

    /// A query has no relevant items in the gallery.
    #[error("no relevant gallery items for query label {0}")]
    NoRelevant(usize),

    /// Invalid configuration or invalid combination of inputs.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Container file does not start with the expected magic bytes.
    #[error("bad container magic")]
    BadMagic,

    /// Container format version is not supported.
    #[error("unsupported container version {0}")]
    BadVersion(u32),

    /// Container section table or payload references bytes beyond EOF, or a
    /// payload is shorter than its own header claims.
    #[error("truncated container: {0}")]
    Truncated(String),

    /// Two container sections claim overlapping byte ranges.
    #[error("overlapping container sections {0} and {1}")]
    Overlap(String, String),

    /// A container section exists but does not parse as the requested kind.
    #[error("malformed section {0}: {1}")]
    BadSection(String, String),

    /// A named section is absent from a container.
    #[error("missing section {0}")]
    MissingSection(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
