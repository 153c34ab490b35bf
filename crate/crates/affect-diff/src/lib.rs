//! Imbalanced tri-modal sequence classification with a learned causal
//! modality graph, a variational bottleneck, and a latent diffusion prior.
//!
//! The crate is organized as a library: every subsystem (data pipeline,
//! encoders, causal graph, fusion/VAE, diffusion prior, classifier head,
//! trainer, metrics, reporting) is usable on its own, and the `examples/`
//! directory shows one runnable entry point per capability. A thin
//! `affect-diff` binary exposes the experiment verbs.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
