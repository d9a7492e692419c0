use thiserror::Error;

/// Errors raised anywhere in the workbench.
///
/// The `Display` form of every variant starts with a stable kebab-case tag so
/// the CLI can emit a single machine-parsable line on failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape-error: {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("degenerate-row: {op}: row {row} has norm below 1e-12")]
    DegenerateRow { op: &'static str, row: usize },
    #[error("degenerate-input: {0}")]
    DegenerateInput(String),
    #[error("parameter-error: {0}")]
    Parameter(String),
    #[error("contract-error: {0}")]
    Contract(String),
    #[error("non-finite: {0}")]
    NonFinite(String),
    #[error("parse-error: {0}")]
    Parse(String),
    #[error("config-error: {0}")]
    Config(String),
    #[error("io-error: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
