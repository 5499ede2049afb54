//! Core building blocks for multimodal graph learning experiments.
//!
//! Everything in this crate is deterministic given explicit seeds and runs
//! without an operating system: `no_std` plus `alloc`. IO, file formats, and
//! model endpoints live in the companion harness crate.
//!
//! - [`tensor`], [`optim`]: dense 2-d f32 tensors, hand-written backward
//!   passes, Adam.
//! - [`graph`]: multimodal node/edge store, splits, neighbor selection.
//! - [`encoder`]: modality fusion and contrastive objectives over frozen
//!   backbone embeddings.
//! - [`gnn`]: node classifiers (MLP, GCN, GraphSAGE, multimodal variants).
//! - [`prompt`]: prompt templates, rendering, and label parsing.
//! - [`tokens`]: neighbor token pooling and projection into a decoder's
//!   embedding width.
//! - [`metrics`]: accuracy, macro-F1, confusion counts, structure gain.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod encoder;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod tokens;
