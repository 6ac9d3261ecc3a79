//! Counter-based RNG substreams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(seed, purpose, index)`, so results do not depend on evaluation order or
//! on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Split = 2,
    ClassifierInit = 3,
    ClassifierShuffle = 4,
    GeneratorInit = 5,
    EpochShuffle = 6,
    TrainNoise = 7,
    Probe = 8,
    Eval = 9,
    Attack = 10,
    Export = 11,
    Sweep = 12,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix(seed ^ splitmix((stream as u64) << 48 ^ splitmix(index)))
}

pub fn substream(seed: u64, stream: Stream, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
