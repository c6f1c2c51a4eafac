use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("noise weight {0} is outside [0, 1]")]
    InvalidWeight(f64),

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("measurement direction is not unit norm (|v| = {0})")]
    NonUnitSetting(f64),

    #[error("invalid response function: {0}")]
    InvalidResponse(String),

    #[error("invalid source: {0}")]
    InvalidSource(String),

    #[error("enumeration oracle supports at most {max} pairs, got {got}")]
    EnumerationTooLarge { got: u32, max: u32 },

    #[error("no conclusive events (conditioning mass {0:e})")]
    NoConclusiveEvents(f64),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("no violation at w = 1 (best value {value}, bound {bound})")]
    NoViolation { value: f64, bound: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
