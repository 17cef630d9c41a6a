//! Named, hierarchical seed derivation.
//!
//! Every random decision in the pipeline draws from a stream derived from
//! the single root seed plus a list of string labels naming the component
//! and purpose (`["train-episode", "17"]`, `["obfuscate", origin_id]`, ...).
//! Derivation is a SHA-256 of the root seed and the labels, so streams are
//! independent, order-sensitive, and stable across platforms and releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn digest(root: u64, labels: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for label in labels {
        // Length-prefix each label so ["ab","c"] and ["a","bc"] differ.
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    h.finalize().into()
}

/// Derive a child seed from `root` and a label path.
pub fn derive(root: u64, labels: &[&str]) -> u64 {
    let d = digest(root, labels);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// A deterministic RNG for the stream named by `labels`.
pub fn rng(root: u64, labels: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(root, labels))
}

/// SHA-256 of a byte string, for checksums and content addressing.
pub fn digest_bytes(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

/// Stable 64-bit fingerprint of a byte string, for keying streams on content.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let d = digest_bytes(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
