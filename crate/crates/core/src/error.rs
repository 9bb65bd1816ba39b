use thiserror::Error;

#[derive(Debug, Error)]
pub enum CdcError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("denoiser error: {0}")]
    Denoiser(String),

    #[error("numerical error: {message} (objective={objective}, inner_step={inner_step})")]
    Numerical {
        message: String,
        objective: f64,
        inner_step: usize,
    },

    #[error("operator failed at step t={t}: {source}")]
    Step {
        t: usize,
        #[source]
        source: Box<CdcError>,
    },

    #[error("lex error at byte {position}: unknown lexeme {lexeme:?}")]
    Lex { position: usize, lexeme: String },

    #[error("oracle refused: {0}")]
    OracleRefused(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CdcError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CdcError {
    CdcError::InvalidArgument(msg.into())
}
