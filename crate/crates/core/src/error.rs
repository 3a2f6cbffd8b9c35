use alloc::string::String;

/// Errors produced by the numeric kernels, the gate and the trainer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("row {row} has no allowed entries")]
    DegenerateRow { row: usize },

    #[error("target row {row} has zero mass on its causal support")]
    DegenerateTarget { row: usize },

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("non-finite loss at step {step} (lr = {lr:e}, grad norm = {grad_norm:e})")]
    Diverged {
        step: usize,
        lr: f64,
        grad_norm: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
