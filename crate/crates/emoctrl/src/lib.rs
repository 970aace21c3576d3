//! Emotion-conditioned caption and image generation, trained and evaluated
//! end to end on a procedural synthetic world.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`synthworld`] generates a labeled world of (emotion, content, caption,
//!   image) quadruplets whose emotions map to controllable color signatures.
//! - [`textmodel`] is a small word-level decoder LM with learnable textual
//!   emotion tokens and low-rank adapters that produces affective captions.
//! - [`emofusion`] encodes captions and fuses learnable visual emotion tokens
//!   into the prompt embedding via cross-attention plus a residual injection.
//! - [`diffusion`] is a pixel-space denoising diffusion model conditioned on
//!   the fused embedding.
//! - [`metrics`] trains probe classifiers on the synthetic world and scores
//!   generated images (emotion accuracy, content accuracy, joint accuracy,
//!   feature diversity, semantic clarity).
//! - [`harness`] wires the stages into a config-driven, resumable, seeded
//!   pipeline with ablation, visualization, and multi-emotion runners.
//!
//! All numerics run on a minimal tape-based autodiff engine in [`nn`].

pub mod checkpoint;
pub mod diffusion;
pub mod emofusion;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synthworld;
pub mod textmodel;
