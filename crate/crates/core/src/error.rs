use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("feature file format error: {0}")]
    Format(String),

    #[error("validation error at line {line}: {msg}")]
    Validation { line: usize, msg: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: usize, breakdown: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user input (bad files, configs, arguments)
    /// rather than by a defect in the program.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Validation { .. }
                | Error::Load(_)
                | Error::Config(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
