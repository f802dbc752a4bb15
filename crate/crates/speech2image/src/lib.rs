//! Speech-conditioned single-stage image GAN, end to end on the CPU.
//!
//! The crate provides:
//! - a reverse-mode differentiable tensor substrate ([`tensor`]) with
//!   second-order support for gradient penalties,
//! - a speech encoder (1-D convs, bidirectional GRUs, attention pooling),
//! - the fusion generator (pixel attention + speech modulation + learned
//!   weighted fusion inside dual-residual blocks) and a conditional
//!   discriminator,
//! - hinge/gradient-penalty/matching objectives and a deterministic
//!   two-timescale trainer,
//! - evaluation metrics (Inception-style score, Fréchet distance, retrieval
//!   mAP and recall@k) over pluggable feature extractors,
//! - a synthetic paired image/speech corpus for desk-scale experiments.
//!
//! See `examples/` for one runnable program per capability and `src/main.rs`
//! for the thin CLI over the same entry points.

pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod checkpoint;
pub mod extractor;
pub mod fusion;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod speech;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
