//! Adversarial patch attacks on small image classifiers and a GAN-based
//! purification defense, with the training, evaluation, and reporting
//! machinery needed to reproduce the full attack/defense pipeline.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`data`] — dataset ingestion (IDX and image-folder), deterministic
//!   per-class splits, and construction of the randomly-patched companion
//!   dataset used to train the purifier.
//! - [`models`] — trainable classifiers with internal feature taps, plus
//!   checkpoint save/load.
//! - [`attack`] — targeted adversarial patch synthesis by projected
//!   gradient optimization, and patch application.
//! - [`defense`] — the purifier GAN (generator, discriminator, loss
//!   system, SSIM) and its training loop.
//! - [`eval`] — accuracy matrices under attack and after defense,
//!   transferability checks, timing measurement, and report emission.
//! - [`nn`] — the minimal CPU tensor/layer engine everything above is
//!   built on (f32 for production, f64 for gradient checking).

pub mod attack;
pub mod data;
pub mod defense;
pub mod eval;
pub mod io;
pub mod models;
pub mod nn;
