//! NVFP4 and MXFP4 weight quantization with optimized scales.
//!
//! The pipeline starts from max-based microscaling scales ([`block`]), refits
//! the global and block scales in closed form ([`cjso`]), and searches
//! decoupled quantization/dequantization block scales ([`dss`]). [`soar`]
//! alternates the two until the reconstruction error stops improving.
//! [`io`] reads safetensors checkpoints and writes packed artifacts, reports
//! and convergence traces; [`cli`] wires it together behind the `soarq` binary.

pub mod block;
pub mod cjso;
pub mod cli;
pub mod codec;
pub mod dss;
pub mod error;
pub mod io;
pub mod soar;
pub mod synthetic;
pub mod tensor;

pub use block::{BlockScale, Format, Layout, Method, QuantConfig, QuantizedTensor};
pub use cjso::ScaleState;
pub use codec::{E4m3, E8m0Scale, Fp4Code};
pub use error::{Error, Result};
pub use soar::{quantize, ConvergenceTrace, MethodResult, Outcome};
pub use tensor::Tensor;
