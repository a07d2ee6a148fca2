//! Named random substreams derived from a master seed.
//!
//! Each purpose string maps to a ChaCha stream id under the same key, so
//! streams are independent and adding a new purpose never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Concrete generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// 64-bit FNV-1a hash of a purpose label.
pub fn purpose_id(purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Generator for `purpose` under `master`.
pub fn substream(master: u64, purpose: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(purpose_id(purpose));
    rng
}

/// Stream used by the environment inside the training loop.
pub fn environment_stream(master: u64) -> StreamRng {
    substream(master, "environment")
}

/// Stream agent `m` uses to sample its own actions during training.
pub fn agent_action_stream(master: u64, m: usize) -> StreamRng {
    substream(master, &format!("agent-{m}/actions"))
}
