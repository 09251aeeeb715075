use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown key: {0}")]
    Key(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// A similarity target that cannot be realized by unit vectors.
    #[error("unrealizable structure: {0}")]
    Structure(String),

    #[error("incompatible warm-start source: {}", .0.join("; "))]
    Compat(Vec<String>),

    #[error("internal invariant failed: {0}")]
    Invariant(String),

    #[error("incomplete run, missing: {}", .0.join(", "))]
    Incomplete(Vec<String>),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status: 2 for bad input, 4 for an incomplete run, 3 for
    /// everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Structure(_) | Error::Compat(_) | Error::Key(_) => 2,
            Error::Incomplete(_) => 4,
            _ => 3,
        }
    }

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
