use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("parameter vector has length {found}, expected {expected}")]
    ParameterShape { expected: usize, found: usize },
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("enumeration of {size} items exceeds the cap of {cap}")]
    EnumerationTooLarge { size: u128, cap: usize },
    #[error("observation at time {time} has zero probability under the model")]
    ImpossibleObservation { time: usize },
    #[error("symbol {symbol} at time {time} is outside the alphabet of size {alphabet}")]
    InvalidSymbol {
        time: usize,
        symbol: usize,
        alphabet: usize,
    },
    #[error("invalid count: {0}")]
    InvalidCount(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("optimization failed after {starts} starts: {detail}")]
    OptimizationFailure { starts: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;
