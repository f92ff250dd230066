//! volprop-core: a self-contained 3-D convolutional framework for lung-nodule
//! proposal generation, plus the measurement tooling around it.
//!
//! The crate covers the full pipeline: dense tensor math with a GEMM-lowered
//! and a slice-decomposed convolution engine, an encoder-decoder proposal
//! network with an anchor head, CT volume preprocessing, anchor assignment and
//! the multi-task objective, SGD training, FROC scoring, and a performance lab
//! (kernel benchmarks plus an analytic memory model).

pub mod ctio;
pub mod error;
pub mod kernels;
pub mod net;
pub mod objective;
pub mod parallel;
pub mod perflab;
pub mod proposals;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
