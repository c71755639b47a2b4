//! Conditioning of the softmax Bregman geometry inside toy transformers.
//!
//! The crate trains matched single-stream and dual-stream (cascade)
//! byte-level transformers, reads every layer through the tied output head,
//! and measures the Hessian of the log-normalizer `H(λ) = Cov[γ | λ]` at each
//! layer. On top of that it compares Euclidean and natural-gradient steering
//! and computes the primal/dual cosine diagnostic.
//!
//! Module map:
//!
//! * [`numerics`]: dense tensors, stable softmax/LayerNorm, Jacobi `eigh`, reverse-mode tape
//! * [`geometry`]: log-normalizer, dual coordinates, Hessian, spectrum summaries
//! * [`model`]: the 2×2 factorial transformer variants and their checkpoints
//! * [`training`]: byte corpus, batching, Adam training loop
//! * [`steering`]: concept directions, Euclidean vs. dual steering, cosine diagnostic
//! * [`experiment`]: Phase-1/Phase-2/task sweeps and report rendering

pub mod error;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod steering;
pub mod training;

pub use error::{Error, Result};
