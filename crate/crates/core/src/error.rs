use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("address {address:#x} is outside the mapped {region} region")]
    Addressing { address: u64, region: &'static str },
    #[error("address {0:#x} is not 64-byte aligned")]
    Misaligned(u64),
    #[error("staging register is incomplete: {0}")]
    IncompleteRegister(&'static str),
    #[error("write queue is full")]
    QueueFull,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    /// The simulation stopped at an injected crash point.
    #[error("simulation halted at crash point {0}")]
    Halted(u64),
}

pub type SimResult<T> = Result<T, SimError>;
