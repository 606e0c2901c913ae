use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigErrors;

/// Pipeline stage an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Verify,
    Observe,
    Identify,
    Export,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Verify => "verify",
            Stage::Observe => "observe",
            Stage::Identify => "identify",
            Stage::Export => "export",
        })
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid scenario:\n{0}")]
    Config(#[from] ConfigErrors),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: ltv_observer::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("observer condition residual {max:.3e} exceeds {tolerance:.1e}")]
    Residuals { max: f64, tolerance: f64 },
    #[error("malformed CSV: {0}")]
    Csv(String),
}

impl CliError {
    pub fn stage(stage: Stage) -> impl FnOnce(ltv_observer::Error) -> CliError {
        move |source| CliError::Stage { stage, source }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 2 for configuration problems, 3 for numerical failures, 4 for
    /// residuals above tolerance, 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        use ltv_observer::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { source, .. } => match source {
                E::Divergence { .. } | E::Singularity { .. } | E::NonFiniteEntry { .. } => 3,
                _ => 2,
            },
            CliError::Residuals { .. } => 4,
            CliError::Io { .. } | CliError::Csv(_) => 1,
        }
    }
}
