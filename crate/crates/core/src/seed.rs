//! Deterministic sub-streams derived from one top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams; the discriminant selects the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    PlantNoise = 1,
    Excitation = 2,
    Witnesses = 3,
    /// HDV disturbances during offline data collection.
    CollectionNoise = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
