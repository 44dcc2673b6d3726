use thiserror::Error;

/// Failure of a command, carrying the process exit status it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for configuration errors, 3 for infeasibility, 4 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

impl From<srhc_core::Error> for CliError {
    fn from(e: srhc_core::Error) -> Self {
        use srhc_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_) | E::Parse { .. } => CliError::Config(msg),
            E::InfeasibleWaypoint { .. } | E::InfeasiblePlan(_) | E::Stagnation { .. } | E::RecoveryInfeasible(_) => {
                CliError::Infeasible(msg)
            }
            E::NonFinite { .. } | E::CorruptFile(_) | E::Io(_) => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
