//! Seed-substream derivation.
//!
//! Permutation replicates, bootstrap replicates, and train/test splits each
//! draw from their own ChaCha stream keyed by `(seed, kind, major, minor)`.
//! A replicate's stream depends only on its key, never on which thread runs
//! it or in what order, so parallel and serial runs produce identical bytes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// What a substream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    /// One permutation replicate of one covariate column.
    Permutation = 1,
    /// One bootstrap resample of the instance rows.
    Bootstrap = 2,
    /// Train/test split shuffle.
    Split = 3,
}

/// Derive the RNG for `(seed, kind, major, minor)`.
///
/// `major` indexes the covariate (permutation) and `minor` the replicate.
/// The key is packed into ChaCha's 64-bit stream id; the base seed selects
/// the cipher key, so distinct seeds give unrelated stream families.
pub fn substream(seed: u64, kind: StreamKind, major: u16, minor: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let stream = ((kind as u64) << 56) | ((major as u64) << 40) | ((minor as u64) << 8);
    rng.set_stream(stream);
    rng
}
