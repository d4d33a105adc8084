//! Continual generalized zero-shot learning on streaming data.
//!
//! This crate implements the full training and evaluation stack for
//! task-free continual zero-shot learning at desk scale:
//!
//! - [`nn`]: dense networks with exact backpropagation and an Adam optimizer,
//!   the substrate for every encoder, decoder and the softmax classifier.
//! - [`vae`]: the twin cross-modal VAE (visual and attribute encoder/decoder
//!   pairs) and its five loss terms — reconstruction, KL, cross-alignment,
//!   distribution alignment, and dark-knowledge distillation.
//! - [`replay`]: reservoir-sampled experience replay whose entries carry the
//!   encoder statistics captured at insertion time ("dark knowledge"), plus
//!   the short-term memories used by the task-free strategies.
//! - [`strategies`]: the five training regimes — offline upper bound,
//!   sequential baseline, task-agnostic, and the two task-free strategies
//!   driven by a batch memory or a short-term memory.
//! - [`classifier`]: latent-feature synthesis and the linear softmax
//!   classifier over seen + unseen classes.
//! - [`eval`]: per-class accuracy, harmonic mean, and the two protocol
//!   aggregates (per-task mSA/mUA/mH and final SA/UA/H).
//! - [`data`]: dataset representation, task and class-block splitters, and a
//!   synthetic generator with a linear attribute-to-feature structure that
//!   makes zero-shot transfer solvable.
//!
//! The crate is `no_std`-compatible (requires `alloc`); file formats and the
//! experiment CLI live in the companion `czsl` crate. All randomness flows
//! through per-purpose ChaCha streams (see [`rng`]) so that every run is
//! bit-reproducible from a single seed.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod classifier;
pub mod data;
pub mod eval;
pub mod matrix;
pub mod nn;
pub mod replay;
pub mod rng;
pub mod strategies;
pub mod vae;

pub use matrix::Matrix;
pub use nn::{Activation, AdamParams, AdamState, DenseNet, Layer, NnError};
pub use replay::{MemoryEntry, ReservoirMemory, Sample, ShortTermMemory};
pub use strategies::{TrainerConfig, TrainingMode, TrainingOutcome};
pub use vae::{CadaVae, DarkKnowledge, GaussianLatent, LossConfig, LossWeights};
