//! Named random substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a; stable across toolchains, unlike `DefaultHasher`.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Generator for the substream `name` of `seed`. Distinct names give
/// independent streams; equal arguments give identical streams.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    rng
}

/// Derives a child seed, for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    use rand::Rng;
    substream(seed, name).random()
}
