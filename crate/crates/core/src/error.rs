use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The annulus around the next waypoint cannot contain the previous
    /// waypoint's goal ball without touching an obstacle.
    #[error("infeasible waypoint: R_min = {r_min} >= R_max = {r_max}")]
    InfeasibleWaypoint { r_min: f64, r_max: f64 },

    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),

    #[error("gradient flow stagnated at {point:?} after {steps} steps (|grad Q| = {grad_norm:e})")]
    Stagnation { point: Vec<f64>, grad_norm: f64, steps: usize },

    #[error("recovery infeasible: {0}")]
    RecoveryInfeasible(String),

    #[error("state became non-finite after {step} steps")]
    NonFinite { step: usize },

    #[error("corrupt field file: {0}")]
    CorruptFile(String),

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
