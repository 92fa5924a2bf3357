use thiserror::Error;

/// Errors produced anywhere in the emulation pipeline.
#[derive(Debug, Error)]
pub enum EmuError {
    /// Malformed or inconsistent caller input (shapes, ranges, missing data).
    #[error("input error: {0}")]
    Input(String),
    /// A model parameter lies outside its admissible domain.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// A factorization or decomposition failed.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// The low-rank inverse update could not be applied; callers re-invert densely.
    #[error("block inverse update failed: {0}")]
    UpdateFailed(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("state error: {0}")]
    State(String),
    #[error("all candidates failed: {0}")]
    AllCandidatesFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EmuError {
    /// Process exit status for this error: 2 for usage/validation problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            EmuError::Input(_) | EmuError::Parameter(_) => 2,
            _ => 1,
        }
    }

    /// Short machine-parsable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            EmuError::Input(_) => "input",
            EmuError::Parameter(_) => "parameter",
            EmuError::Numerical(_) => "numerical",
            EmuError::UpdateFailed(_) => "update-failed",
            EmuError::Resource(_) => "resource",
            EmuError::State(_) => "state",
            EmuError::AllCandidatesFailed(_) => "all-candidates-failed",
            EmuError::Io(_) => "io",
            EmuError::Csv(_) => "csv",
            EmuError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, EmuError>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(EmuError::Input(msg.into()))
}
