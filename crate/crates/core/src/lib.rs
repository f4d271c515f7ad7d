//! Slot-attention adapters for generative video temporal grounding.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] - a small reverse-mode AD tape over f64 tensors, plus AdamW.
//! * [`adapter`] - the slot adapter: bottleneck projection, iterative slot
//!   attention with GRU refinement, cross-attention reconstruction and a
//!   zero-initialised residual up-projection.
//! * [`alignment`] - token-pair affinities from slot assignments and from
//!   external features, and the cosine alignment loss between them.
//! * [`decoder`] - a toy causal transformer that reads interleaved
//!   frame/timestamp/query sequences and writes `[a.bs, c.ds]` windows.
//! * [`metrics`], [`diagnostics`] - grounding metrics, MMD, similarity
//!   ranking and noise-perturbation probes.
//! * [`synth`] - synthetic videos with planted entities, ARI scoring.
//! * [`runner`] - configuration, training, evaluation and file formats.

pub mod adapter;
pub mod alignment;
pub mod autodiff;
pub mod decoder;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod runner;
pub mod synth;

pub use error::{Error, Result};
