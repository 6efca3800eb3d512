//! Desk-scale implementation of a speed-optimized BERT-style encoder.
//!
//! The crate provides the encoder architecture (ALiBi attention with naive,
//! tiled and unpadded execution paths, GeGLU feedforward, low-precision
//! LayerNorm), the training recipe around it (30% MLM masking, decoupled
//! AdamW with warmup + linear decay, checkpointing), and the efficiency
//! accounting used to evaluate it (parameter counts, FLOPs, MFU, cost,
//! Pareto curves) — all on a small self-contained tensor/autodiff substrate.

pub mod alibi;
pub mod attention;
pub mod bf16;
pub mod config;
pub mod data;
pub mod error;
pub mod instrument;
pub mod layers;
pub mod perf;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unpad;

pub use error::{Error, Result};
pub use tensor::{Dtype, Tensor};
