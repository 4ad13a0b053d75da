//! Quantization-aware training of low-precision convolutional networks with a
//! jointly trained full-precision auxiliary module.
//!
//! The low-precision backbone `F` ([`net`]) exposes block outputs to an
//! auxiliary module `H` ([`auxiliary`]) built from adaptors and aggregators.
//! Both share `F`'s parameters during training; the shared gradient is the
//! average of the main and auxiliary contributions. `H` is discarded at
//! inference time.

pub mod autodiff;
pub mod auxiliary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod element;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod param;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use element::{DType, Element};
pub use error::{Error, Result};
pub use tensor::Tensor;
