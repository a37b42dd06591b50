//! Deterministic seed derivation. Every random stream in an experiment is
//! keyed by the master seed and a tuple of indices, so results do not depend
//! on scheduling order or on how many other streams were drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a master seed together with a path of indices into a child seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x6A09_E667_F3BC_C908);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x3C6E_F372_FE94_F82B)));
    }
    h
}

/// Stream roles used when deriving replica seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Role {
    Path = 1,
    Reference = 2,
    EstimateSample = 3,
    Floor = 4,
    Resample = 5,
}
