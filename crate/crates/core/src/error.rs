use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("exact enumeration over {bonds} bonds exceeds the limit of {limit}")]
    OracleTooLarge { bonds: usize, limit: usize },

    #[error("Wolff updates require q = 2 and no external field")]
    WolffUnsupported,

    #[error("cluster winds around the torus (extent {extent}); it has no outer loop")]
    WrappingCluster { extent: f64 },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("sample budget exhausted after {completed} samples")]
    Exhausted { completed: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
