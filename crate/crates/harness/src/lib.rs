//! Std companion to `mmgl-core`: dataset ingestion and binary embedding
//! files, the pluggable VLM client with its response cache, the aligner and
//! predictor pipelines, experiment orchestration, and report emission. The
//! `mmgl` binary in this crate is the command-line surface.

pub mod aligner;
pub mod client;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod predictor;
