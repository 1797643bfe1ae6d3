use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate depth range: min {min} >= max {max}")]
    DegenerateRange { min: f64, max: f64 },

    #[error("numerical failure at level {level}: {message}")]
    Numerical { level: usize, message: String },

    #[error("level {level}: {source}")]
    Level {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training aborted at epoch {epoch}, sample `{sample}`: {message}")]
    Training {
        epoch: usize,
        sample: String,
        message: String,
    },

    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Checkpoint { offset: u64, reason: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("semantic encoder initialization failed: {0}")]
    Init(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn at_level(self, level: usize) -> Self {
        match self {
            e @ (Error::Numerical { .. } | Error::Level { .. }) => e,
            e => Error::Level {
                level,
                source: Box::new(e),
            },
        }
    }

    pub fn for_sample(self, id: &str) -> Self {
        Error::Sample {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a runtime failure; the CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => true,
            Error::Sample { source, .. } | Error::Level { source, .. } => source.is_usage(),
            _ => false,
        }
    }

    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
