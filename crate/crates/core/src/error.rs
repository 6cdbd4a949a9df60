use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "singular moment matrix at point {point} ({centers} centers in support, condition {condition:.3e}); enlarge the support size"
    )]
    SingularMoment {
        point: usize,
        centers: usize,
        condition: f64,
    },

    #[error("basis assembly failed at {} measurement point(s): {:?}", points.len(), points)]
    AssemblyFailed { points: Vec<usize> },

    #[error("shape matrix is rank deficient (smallest singular value {smallest_singular:.3e}, condition {condition:.3e})")]
    RankDeficient {
        smallest_singular: f64,
        condition: f64,
    },

    #[error("degenerate bond {from} -> {to}: deformed length collapsed")]
    DegenerateBond { from: usize, to: usize },

    #[error("invalid force-state model: {0}")]
    InvalidModel(String),

    #[error("missing boundary data for {} node(s): {:?}", nodes.len(), nodes)]
    MissingBoundary { nodes: Vec<usize> },

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("solver did not converge after {iterations} iterations (final residual {:.3e})", history.last().copied().unwrap_or(f64::NAN))]
    NotConverged { iterations: usize, history: Vec<f64> },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

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

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
