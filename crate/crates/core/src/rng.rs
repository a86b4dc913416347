//! Seed derivation. Every random stream in a run is keyed by
//! `(seed, purpose, a, b)` so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    DataMeans = 1,
    TrainSamples = 2,
    TestSamples = 3,
    Partition = 4,
    ModelInit = 5,
    Sampling = 6,
    Client = 7,
    Probe = 8,
    Repeat = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ stream as u64);
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(32))
}

pub fn stream(seed: u64, stream: Stream, a: u64, b: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, a, b))
}
