//! Stable seed derivation.
//!
//! Every random stream in the engine is keyed by a root seed plus a few
//! labels, so a module's randomness never depends on what other modules or
//! interventions did.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of string labels.
pub fn derive(seed: u64, labels: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    for label in labels {
        // length prefix keeps ("ab","c") and ("a","bc") apart
        h = fnv1a(h, &(label.len() as u64).to_le_bytes());
        h = fnv1a(h, label.as_bytes());
    }
    splitmix(h)
}

/// Per-module seed: a function of (run seed, task id, module index) only.
pub fn module_seed(run_seed: u64, task_id: &str, module_index: usize) -> u64 {
    derive(run_seed, &[task_id, &module_index.to_string()])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
