//! Ultra-low-bit weight quantization toolkit.
//!
//! - [`tensor`]: dense tensors, seeded generators, raw tensor files
//! - [`fp8`]: FP8-E4M3 emulation and quantize-dequantize
//! - [`scale_search`]: outlier-isolating FP8 scale search for a two-layer block
//! - [`ternary`]: ternary quantization with deadzone-bias training surrogate
//! - [`sparse34`]: 3:4-sparse ternary with 5-bit block codes and LUT matvec
//! - [`seq`]: symmetric 2-bit quantization with scale micro-tuning
//! - [`asq`]: packed container format for all schemes
//! - [`bench`]: fidelity, speed and scale-search experiment drivers

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asq;
pub mod bench;
pub mod bits;
pub mod error;
pub mod fp8;
pub(crate) mod io;
pub mod scale_search;
pub mod seq;
pub mod sparse34;
pub mod tensor;
pub mod ternary;

pub use error::{Error, Result};
pub use tensor::{RngSpec, Tensor};
