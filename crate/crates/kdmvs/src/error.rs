use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the crate. Variants map onto the failure classes
/// surfaced by the CLI: configuration problems, malformed files, numeric
/// breakdown during optimization, and empty pseudo-label sets.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}{}", ctx_suffix(.context))]
    ShapeMismatch {
        left: crate::grid::Shape,
        right: crate::grid::Shape,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no validated pixels survived in any view; nothing to distill")]
    EmptyPseudoLabels,

    #[error("autodiff misuse: {0}")]
    Autodiff(&'static str),
}

fn ctx_suffix(context: &&'static str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
