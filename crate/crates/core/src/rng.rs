//! Deterministic random streams.
//!
//! Every random draw in a run comes from a stream keyed by the run seed and a
//! small tuple of indices (batch, prompt, rollout, ...). Results therefore do
//! not depend on scheduling, and resuming from a checkpoint needs no RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains, so that e.g. prompt draws and rollout draws never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Prompt = 1,
    Rollout = 2,
    Eval = 3,
    EvalSample = 4,
    Init = 5,
    Test = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: Domain, indices: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ 0x5650_445F_5345_4544);
    h = splitmix(h ^ domain as u64);
    for &i in indices {
        h = splitmix(h ^ i);
    }
    ChaCha8Rng::seed_from_u64(h)
}
