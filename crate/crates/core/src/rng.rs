//! Seeded random streams.
//!
//! All randomness derives from one `u64` seed. Independent consumers (files,
//! individual trials, sampling workers) each take their own ChaCha stream, so
//! results do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream reserved for generating file contents.
pub const FILES_STREAM: u64 = u64::MAX;

/// The generator for stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
