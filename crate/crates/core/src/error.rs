use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid rate {name} = {value}: rates must be finite and strictly positive (ms^-1)")]
    InvalidRate { name: &'static str, value: f64 },

    #[error("invalid delay {value} ms: delays must be finite and non-negative")]
    InvalidDelay { value: f64 },

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("negative expected count {value} for signal {signal}")]
    NegativeExpectation { signal: String, value: f64 },

    #[error("cannot form a ratio estimate: {0}")]
    Estimation(&'static str),

    #[error("uninformative design: the information matrix is singular")]
    UninformativeDesign,

    #[error("posterior update rejected: {0}")]
    PosteriorCollapsed(&'static str),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub(crate) fn check_delay(tau: f64) -> Result<()> {
    if tau.is_finite() && tau >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidDelay { value: tau })
    }
}
