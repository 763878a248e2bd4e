use thiserror::Error;

/// Errors raised by the numerical routines and the command-line driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular resolvent: lambda = {lambda} coincides with eigenvalue {index}")]
    SingularResolvent { lambda: f64, index: usize },

    #[error("simulation diverged at step {step} on path {path}")]
    Diverged { step: usize, path: usize },

    #[error("degenerate regression basis: {0}")]
    DegenerateBasis(String),

    #[error("identity invalid: {0}")]
    IdentityInvalid(String),

    #[error("wrong theorem: {0}")]
    WrongTheorem(String),

    #[error("step rule failure: {0}")]
    StepRule(String),

    #[error("oracle breakdown: {0}")]
    OracleBreakdown(String),

    #[error("lattice too small: escape probability {0:.4} exceeds 1%")]
    LatticeTooSmall(f64),

    #[error("preset error: {0}")]
    Preset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
