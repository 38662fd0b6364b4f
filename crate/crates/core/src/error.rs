use alloc::string::String;

use crate::synth::WeatherKind;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid degradation spec: expected {expected}, got {got}")]
    WrongKind { expected: WeatherKind, got: WeatherKind },
    #[error("severity {0} outside [0, 1]")]
    Severity(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFinite { step: u64, epoch: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;
