use std::path::PathBuf;

use lmp_core::diagnostics::DiagError;
use lmp_core::msem::MsemError;
use lmp_core::panel_io::PanelError;
use lmp_core::simulator::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("panel_io: {0}")]
    Panel(#[from] PanelError),
    #[error("params: {0}")]
    Params(String),
    #[error("simulator: {0}")]
    Sim(#[from] SimError),
    #[error("msem: {0}")]
    Msem(#[from] MsemError),
    #[error("diagnostics: {0}")]
    Diag(#[from] DiagError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// 2 for bad usage, configuration, or unreadable inputs; 1 for anything
    /// that goes wrong once the computation has started.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) | Self::Io { .. } | Self::Panel(_) | Self::Params(_) => 2,
            Self::Sim(_) | Self::Msem(_) | Self::Diag(_) | Self::Invariant(_) => 1,
        }
    }
}
