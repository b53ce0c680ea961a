use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] mobgcl::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 2 for usage errors, 4 for diverged training, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(mobgcl::Error::Diverged { .. }) => 4,
            _ => 3,
        }
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
