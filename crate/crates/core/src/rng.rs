//! Seed derivation. Every random draw in a run comes from a ChaCha stream keyed
//! by the run seed plus a purpose and stage, so stages can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Synthetic = 1,
    Split = 2,
    ClassOffset = 3,
    Projector = 4,
    Shuffle = 5,
    SupportBias = 6,
    GradCheck = 7,
}

pub fn stream(seed: u64, purpose: Stream, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ stage);
    rng
}
