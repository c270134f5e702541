//! Dual-stream diffusion transformer for joint audio-video generation.
//!
//! Two transformer stacks (audio and video) exchange information per block
//! through cross-modal context attention: temporally aligned rotary
//! embeddings with windowed partitioning, learnable context token banks, and
//! per-task routing of the KV composition. Training uses a flow-matching
//! objective over a multi-task mix; inference offers guidance modes whose
//! unconditional branch routes cross-attention to the context tokens.
//!
//! Everything runs on a small deterministic CPU tensor library with
//! reverse-mode differentiation, in 32-bit for training and 64-bit for
//! gradient checks.

pub mod cca;
pub mod ckpt;
pub mod config;
pub mod dcr;
pub mod dump;
pub mod error;
pub mod guidance;
pub mod model;
pub mod params;
pub mod rng;
pub mod runner;
pub mod scalar;
pub mod synthdata;
pub mod tape;
pub mod tarp;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;
