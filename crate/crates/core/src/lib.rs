//! Weight-only post-training quantization.
//!
//! Layer weights are decoupled into an integer grid part and floating-point
//! per-group (scale, zero) parameters. Each output column is solved by
//! alternating an analytic scale/zero solve with a sequential integer solve
//! against a calibration Hessian; a block-wise stage then fine-tunes scales,
//! zeros, and normalization parameters with the integers frozen. Ships with
//! bit-exact tensor and packed-layer file formats, an exhaustive
//! small-instance oracle, and a CLI (`dquant`).

pub mod blockwise;
pub mod config;
pub mod error;
pub mod format;
pub mod layerwise;
pub mod linalg;
pub mod oracle;
pub mod report;
pub mod tensor;

pub use config::{ApproxLevel, QuantConfig};
pub use error::DqError;
pub use layerwise::{quantize_layer, solve_column, ColumnProblem, QuantizedLayer};
pub use linalg::{build_hessian, Hessian};
pub use tensor::Tensor2D;
