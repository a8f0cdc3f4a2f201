//! Multimodal open-set domain generalization and adaptation on
//! precomputed feature embeddings.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: reverse-mode differentiation over dense matrices, Adam.
//! - [`data`]: synthetic multimodal domain-shift benchmark and binary embedding I/O.
//! - [`net`]: encoders, classifier heads, cross-modal translators, jigsaw head.
//! - [`pretext`]: masked cross-modal translation and multimodal jigsaw puzzles.
//! - [`objective`]: entropy weighting, entropy minimization, DG and DA totals.
//! - [`eval`]: confidence scores, open-set decisions, OS*/UNK/HOS.
//! - [`harness`]: training loops, sweeps, gradient checks, checkpoints.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod net;
pub mod objective;
pub mod pretext;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;

/// Deterministic generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds the crate's generator.
pub fn seeded(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derives an independent child seed from a root seed and a stream tag.
pub fn child_seed(root: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = root ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
