//! Counter-derived random number substreams.
//!
//! Every replicate of every Monte Carlo experiment draws from its own ChaCha8
//! stream. The key is derived from the master seed and a purpose label; the
//! replicate index selects the ChaCha stream under that key. Results are
//! therefore identical for any number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// FNV-1a, used only to turn purpose labels into stable 64-bit ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngStreamPlan {
    pub master_seed: u64,
}

impl RngStreamPlan {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Key for a purpose label. Distinct labels give unrelated keys.
    pub fn key(&self, label: &str) -> u64 {
        mix64(self.master_seed ^ mix64(fnv1a(label.as_bytes())))
    }

    /// Generator for replicate `index` of the experiment named `label`.
    pub fn stream(&self, label: &str, index: u64) -> SimRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key(label));
        rng.set_stream(index);
        rng
    }

    /// A plan for a nested experiment, so nested labels cannot collide with
    /// the parent's.
    pub fn child(&self, label: &str) -> RngStreamPlan {
        RngStreamPlan::new(self.key(label))
    }
}
