//! Desk-scale laboratory for studying how grokking (delayed generalization)
//! changes machine unlearning.
//!
//! The crate trains small models through the grokking transition, applies a
//! family of unlearning algorithms to pre- vs post-grokking checkpoints,
//! evaluates the full metric suite (UA/RA/TA, UES, MIA, extraction strength,
//! gradient correlation, CKA, local complexity, FGSM robustness), and checks
//! the modular-gradient correlation theorem by Monte Carlo.
//!
//! Layout mirrors the pipeline:
//!
//! - [`tensor`]: dense f32 tensors with reverse-mode autodiff
//! - [`rng`]: counter-based seeded randomness with named streams
//! - [`zoo`]: model families (MLP, tiny transformer, tiny CNN) + checkpoints
//! - [`data`]: dataset generators and forget/retain/test splits
//! - [`train`]: optimizers, training loop, grokking detection
//! - [`unlearn`]: GA, fine-tune, grad-tau, KL-anchored, Fisher, SCRUB, retrain
//! - [`metrics`]: the evaluation and mechanism-analysis suite
//! - [`modsim`]: Monte Carlo verification of the modular-gradient theorem
//! - [`harness`]: experiment grids, results store, reports, CLI plumbing

pub mod data;
pub mod error;
pub mod gradvec;
pub mod harness;
pub mod metrics;
pub mod modsim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod unlearn;
pub mod zoo;

pub use error::{Error, Result};
pub use gradvec::{GradVector, IndexMap};
pub use rng::RngState;
pub use tensor::Tensor;
