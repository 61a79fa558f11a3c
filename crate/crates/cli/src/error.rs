use hyfuse_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 1 for unreadable or malformed inputs, 2 for bad invocations or
    /// configuration, 3 for broken internal invariants.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Verification(_) => EXIT_INVARIANT,
            CliError::Core(e) => match e {
                CoreError::Io { .. }
                | CoreError::Parse { .. }
                | CoreError::Format(_)
                | CoreError::Vocabulary(_)
                | CoreError::Label(_)
                | CoreError::Length { .. }
                | CoreError::Input(_) => EXIT_IO,
                CoreError::Config(_) => EXIT_USAGE,
                CoreError::Shape(_) | CoreError::Target(_) | CoreError::Numeric(_) | CoreError::State(_) => {
                    EXIT_INVARIANT
                }
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Core(CoreError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
