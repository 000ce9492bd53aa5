use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bit-width {0} outside [1, 8]")]
    BadBitWidth(u32),
    #[error("code {code} does not fit in {bits} bits")]
    CodeOverflow { code: u32, bits: u32 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bit-width mismatch: expected {expected}, found {found}")]
    BitWidthMismatch { expected: u32, found: u32 },
    #[error("accumulator bound {0} exceeds 2^62")]
    AccumulatorOverflowRisk(u128),
    #[error("input {h}x{w} not divisible by stride {stride}")]
    NonDivisibleInput { h: usize, w: usize, stride: usize },
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("bad labels: {0}")]
    BadLabels(String),
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error("bad constant: {0}")]
    BadConstant(String),
    #[error("bad crop: {0}")]
    BadCrop(String),
    #[error("missing asset: {0}")]
    MissingAsset(String),
    #[error("confusion matrix has no scored classes")]
    EmptyMatrix,
    #[error("training diverged at iteration {iter}")]
    DivergenceDetected { iter: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
