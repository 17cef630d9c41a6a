//! Few-shot malware family classification on entropy images.
//!
//! The pipeline turns raw binaries into 105x105 grayscale images of
//! per-block Shannon entropy, optionally inserts NOP-byte noise to mimic
//! code obfuscation, and meta-trains a weight-shared denoising
//! autoencoder with a learned relation head on episodically sampled
//! support/query tasks. Everything is seeded: the same root seed
//! reproduces corpora, episodes, weights and reports bit for bit.
//!
//! Module map:
//! - [`binfeed`]: corpus ingestion, synthetic corpora, manifests, augmentation
//! - [`obfuscate`]: NOP insertion plans and corpus expansion
//! - [`entropix`]: entropy images, resize/rotate, normalization, PGM export
//! - [`gradcore`]: the small differentiable layer set and optimizers
//! - [`sdae`]: the encoder/decoder/relation-head model and its losses
//! - [`episodes`]: class splits and C-way K-shot episode sampling
//! - [`trainer`]: the episodic training loop, evaluation and embedding export

pub mod binfeed;
pub mod entropix;
pub mod episodes;
pub mod gradcore;
pub mod obfuscate;
pub mod sdae;
pub mod seeds;
pub mod trainer;
