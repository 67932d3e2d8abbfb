use alloc::string::String;
use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,
    #[error("degenerate distribution")]
    DegenerateDistribution,
    #[error("unsupported QAM order {0}: expected 4, 16 or 64")]
    UnsupportedOrder(usize),
    #[error("unknown constellation `{0}` (valid: bpsk, qpsk, 16qam, 64qam)")]
    UnknownConstellation(String),
    #[error("unknown channel `{0}` (valid: proakis-a, proakis-b, proakis-c)")]
    UnknownChannel(String),
    #[error("invalid channel: {0}")]
    InvalidChannel(&'static str),
    #[error("degenerate preprocessor")]
    DegeneratePreprocessor,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(
        "trellis with {states} states exceeds the limit of {limit}; shorten the channel or use brute force for tiny blocks"
    )]
    StateSpaceTooLarge { states: u64, limit: u64 },
    #[error("exhaustive search over {candidates} sequences exceeds the limit of {limit}")]
    SearchSpaceTooLarge { candidates: u64, limit: u64 },
    #[error("singular normal equations")]
    SingularSystem,
    #[error("non-finite loss in block with seed {seed}")]
    NonFiniteLoss { seed: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
