//! MSF-Mamba style video recognition, from scratch: a dense f64 tensor
//! substrate with tape-based reverse-mode differentiation, selective
//! state-space scans, motion-aware multiscale state fusion, adaptive scale
//! weighting, and the synthetic-data and serialization glue needed to
//! train, evaluate, and benchmark the whole thing deterministically.

pub mod aswm;
pub mod bench;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod mcfm;
pub mod model;
pub mod ops;
pub mod ssm;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{MsfError, Result};
pub use tensor::Tensor;
