//! Mixed Posit4/FixP4 low-precision arithmetic for neural-network inference.
//!
//! The crate covers the full pipeline:
//!
//! - [`posit`]: bit-exact Posit(4,1) codec, scaled variants, and a general
//!   P(n,es) decoder for validation.
//! - [`quantize`]: FixP4 and Posit4 weight quantizers, PACT activation
//!   quantization, and the backward gradient estimators (STE and the
//!   tanh-based estimator for the non-uniform Posit grid).
//! - [`sensitivity`]: per-layer sensitivity scores and the greedy
//!   budget-constrained assignment of layers to Posit or FixP.
//! - [`nn`] / [`train`]: a small deterministic tensor/autodiff engine with
//!   fake-quantized forward passes and an Adam + cosine-schedule training loop.
//! - [`macsim`]: bit-exact simulation of the Posit/FixP and FixP/FixP MAC
//!   datapaths plus the energy-overhead model.
//! - [`data`] / [`io`]: dataset loading (synthetic blobs, CSV, IDX) and the
//!   model file format (JSON manifest + f32 blob).

pub mod data;
pub mod error;
pub mod io;
pub mod macsim;
pub mod nn;
pub mod posit;
pub mod quantize;
pub mod sensitivity;
pub mod tensor;
pub mod train;

pub use error::CoreError;
pub use tensor::Tensor;
