//! Splittable seeding.
//!
//! Every random draw in the pipeline comes from a ChaCha8 generator keyed by
//! the global 64-bit seed and selected by a 64-bit stream id. The high 16
//! bits of the stream id name a domain (data generation, oracle corruption,
//! training, refinement, ...) and the low 48 bits index within the domain, so
//! per-sample streams are independent of how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains. Values are part of the reproducibility contract.
pub mod domain {
    pub const SCENE: u16 = 1;
    pub const ORACLE: u16 = 2;
    pub const TRAIN: u16 = 3;
    pub const REFINE: u16 = 4;
    pub const INIT: u16 = 5;
    pub const BASE_TRAIN: u16 = 6;
    pub const CALIBRATE: u16 = 7;
}

pub fn stream_id(domain: u16, index: u64) -> u64 {
    ((domain as u64) << 48) | (index & 0xFFFF_FFFF_FFFF)
}

/// Generator for `(seed, domain, index)`.
pub fn rng_for(seed: u64, domain: u16, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(domain, index));
    rng
}
