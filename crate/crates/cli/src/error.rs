use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] idsc::Error),
    #[error("{0}")]
    SuiteFailed(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 0 success, 1 usage or config, 2 data or format, 3 numeric, 4 suite failure.
    pub fn exit_code(&self) -> i32 {
        use idsc::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::SuiteFailed(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_) => 1,
                E::Numeric(_) | E::Domain(_) => 3,
                _ => 2,
            },
        }
    }
}
