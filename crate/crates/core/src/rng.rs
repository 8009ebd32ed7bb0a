//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream identified by
//! `(seed, domain, index)`. Domains separate unrelated uses of one seed
//! (E-step iterations, simulator components); the index selects the
//! household or chain. Results therefore do not depend on thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive an independent seed for a named purpose.
pub fn derive_seed(seed: u64, domain: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(domain.wrapping_mul(0xA24B_AED4_963E_E407)))
}

pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain));
    rng.set_stream(index);
    rng
}

/// Well-known domains.
pub mod domain {
    pub const ESTEP: u64 = 1 << 32;
    pub const SIM_U: u64 = 2 << 32;
    pub const SIM_V: u64 = 3 << 32;
    pub const SIM_OMEGA: u64 = 4 << 32;
    pub const DIAGNOSTICS: u64 = 5 << 32;
}
