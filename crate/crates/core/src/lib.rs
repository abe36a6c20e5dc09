//! Software-simulated NVFP4/INT8 mixed-precision inference for a toy
//! diffusion transformer, with dynamic precision routing, temporal delta
//! caching, and outlier-aware cache refresh.

pub mod cli;
pub mod config;
pub mod dmpq;
pub mod engine;
pub mod error;
pub mod hadamard;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod pdr;
pub mod pipeline;
pub mod qdt;
pub mod quant;
pub mod tdc;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use layer::{LayerId, Precision};
pub use tensor::{Element, Tensor};
