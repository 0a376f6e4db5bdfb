//! Seeded random streams.
//!
//! Every stochastic consumer owns a ChaCha stream derived from a master seed
//! and a fixed stream id, so draws in one consumer never shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const X_INIT: u64 = 1;
    pub const Y_INIT: u64 = 2;
    pub const X_STEP: u64 = 3;
    pub const Y_STEP: u64 = 4;
    pub const CORRECTOR: u64 = 5;
    pub const DATA: u64 = 16;
    pub const CORRUPT: u64 = 17;
    pub const INIT_PARAMS: u64 = 18;
    pub const BATCHES: u64 = 19;
    pub const NOISE: u64 = 20;
}

/// A generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Mix a child index into a seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The four streams a coupled sampling run draws from.
///
/// Initial states and per-step posterior noise are separate so that a
/// deterministic sampler is independent of the step streams.
#[derive(Clone, Debug)]
pub struct SamplingStreams {
    pub init_seed: u64,
    pub step_seed: u64,
    pub x_init: Rng,
    pub y_init: Rng,
    pub x_step: Rng,
    pub y_step: Rng,
}

impl SamplingStreams {
    pub fn new(seed: u64) -> Self {
        Self::split(seed, seed)
    }

    /// Initial states from `init_seed`, step noise from `step_seed`.
    pub fn split(init_seed: u64, step_seed: u64) -> Self {
        Self {
            init_seed,
            step_seed,
            x_init: stream_rng(init_seed, stream::X_INIT),
            y_init: stream_rng(init_seed, stream::Y_INIT),
            x_step: stream_rng(step_seed, stream::X_STEP),
            y_step: stream_rng(step_seed, stream::Y_STEP),
        }
    }
}
