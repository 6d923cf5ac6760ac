//! Seed fan-out.
//!
//! Every random draw in the crate comes from `stream(seed, tag)`: a ChaCha8
//! generator keyed by the user seed whose stream id is the 64-bit FNV-1a hash
//! of a domain tag such as `"noise"` or `"ga/3/17"`. Distinct tags give
//! independent streams; the same `(seed, tag)` always gives the same stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, tag: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(tag));
    rng
}
