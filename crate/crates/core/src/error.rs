use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("grid height {height} and width {width} must be divisible by {factor}")]
    NotDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class id {value} out of range for {num_classes} classes")]
    ClassRange { value: usize, num_classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepRange { t: usize, lo: usize, hi: usize },
    #[error("impossible diffusion state at pixel {pixel}: q(x_t | x_0) = 0")]
    ImpossibleState { pixel: usize },
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("unsupported file format: {0}")]
    Format(String),
    #[error("checkpoint version mismatch: {0}")]
    Version(String),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("non-finite loss at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("parameters are frozen")]
    Frozen,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
