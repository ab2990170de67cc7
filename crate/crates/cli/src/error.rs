use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint fingerprint {found} does not match config fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("gradient check failed: {failed} of {groups} groups exceed {threshold:e}")]
    GradcheckFailed {
        failed: usize,
        groups: usize,
        threshold: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] trfs_core::Error),
}

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 validation, 2 numerical failure, 3 IO.
    pub fn exit_code(&self) -> u8 {
        use trfs_core::Error as E;
        match self {
            CliError::Config(_) | CliError::FingerprintMismatch { .. } => 1,
            CliError::GradcheckFailed { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::NonFiniteLoss(_) => 2,
                E::Io { .. }
                | E::Checkpoint(_)
                | E::BadMagic(_)
                | E::TruncatedPayload { .. }
                | E::UnsupportedVersion(_)
                | E::UnsupportedDtype(_)
                | E::DtypeMismatch { .. } => 3,
                _ => 1,
            },
        }
    }
}
