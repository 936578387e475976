use thiserror::Error;

/// Errors produced by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mesh tangling: element {element} has non-positive volume {volume:e} at t = {time}")]
    MeshTangling {
        element: usize,
        volume: f64,
        time: f64,
    },

    #[error("inadmissible state (density {density:e}, pressure {pressure:e}) in element {element} at t = {time}")]
    Inadmissible {
        element: usize,
        time: f64,
        density: f64,
        pressure: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("wall-clock budget of {limit} s exhausted at t = {time} after {steps} steps")]
    Budget { limit: f64, time: f64, steps: usize },

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numerics (tangling, admissibility, solver breakdown)
    /// as opposed to usage or I/O problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::MeshTangling { .. } | Error::Inadmissible { .. } | Error::Numerical(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
