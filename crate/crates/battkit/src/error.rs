use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{path}: line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("integration failed at step {step} (t = {time} s): {message}")]
    Integration {
        step: usize,
        time: f64,
        message: String,
    },

    #[error("observer design infeasible: best max eigenvalue {best_max_eig:.3e} ({detail})")]
    DesignInfeasible { best_max_eig: f64, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 runtime, 2 config or IO, 3 design infeasible.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format { .. } | Error::Config(_) | Error::Io { .. } => 2,
            Error::DesignInfeasible { .. } => 3,
            _ => 1,
        }
    }
}
