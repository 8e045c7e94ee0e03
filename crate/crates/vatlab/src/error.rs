use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum VatlabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invariant failure: {0}")]
    Invariant(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

pub type Result<T, E = VatlabError> = std::result::Result<T, E>;

impl VatlabError {
    /// Process exit code: 1 config, 2 data, 3 numeric, 4 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            VatlabError::Config(_) => 1,
            VatlabError::Data(_) | VatlabError::Io { .. } => 2,
            VatlabError::Numeric(_) => 3,
            VatlabError::Invariant(_) => 4,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> VatlabError + '_ {
        move |source| VatlabError::Io { path: path.to_path_buf(), source }
    }
}

impl From<vatlab_core::Error> for VatlabError {
    fn from(e: vatlab_core::Error) -> Self {
        use vatlab_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_) | E::DimensionGuard { .. } | E::ZeroDimension => VatlabError::Config(msg),
            E::NonFinite { .. } | E::NonFiniteGradient(_) | E::NoConvergence(_) => VatlabError::Numeric(msg),
            _ => VatlabError::Data(msg),
        }
    }
}
