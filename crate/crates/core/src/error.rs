use thiserror::Error;

/// Errors shared by the market, billing, visibility, and simulation layers.
#[derive(Debug, Error)]
pub enum MarketError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("permission denied: {0}")]
    Permission(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, MarketError>;
