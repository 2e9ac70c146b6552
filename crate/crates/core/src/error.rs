//! Error types shared by the numeric modules.

use thiserror::Error;

/// Errors raised by codecs, quantizers, the training engine, and the MAC
/// simulator. File-format errors live in [`crate::io`] and [`crate::data`].
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("input to quantizer is not finite: {0}")]
    NonFiniteInput(f64),

    #[error("degenerate scale (tensor is all zeros); skip quantization for this tensor")]
    DegenerateScale,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tensor contains non-finite values in {0}")]
    NonFiniteTensor(String),

    #[error("NaR is not a valid MAC operand")]
    NarOperand,

    #[error("mixed dot product requires a single posit scale variant, found {0:?} and {1:?}")]
    MixedVariants(crate::posit::ScaleVariant, crate::posit::ScaleVariant),

    #[error("MAC trace is empty: total MAC count is zero")]
    EmptyTrace,

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
}
