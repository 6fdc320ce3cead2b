//! Stable hashing and labeled sub-seed derivation.
//!
//! `std::hash` makes no cross-version stability promise, so anything that
//! feeds a persisted or reproducible result goes through these functions.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Seeded 64-bit hash of a byte string, stable across platforms and releases.
pub fn stable_hash(seed: u64, bytes: &[u8]) -> u64 {
    mix64(fnv1a(bytes) ^ mix64(seed))
}

/// Derives an independent sub-seed for the component named `label`.
///
/// Changing how one component consumes randomness never perturbs the
/// streams of the others.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    stable_hash(root, label.as_bytes())
}

/// Incremental stable hasher, used for trace fingerprints.
#[derive(Debug, Clone)]
pub struct StableHasher {
    state: u64,
}

impl Default for StableHasher {
    fn default() -> Self {
        Self { state: FNV_OFFSET }
    }
}

impl StableHasher {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state = (self.state ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
        // field separator so ("ab","c") and ("a","bc") differ
        self.state = (self.state ^ 0xff).wrapping_mul(FNV_PRIME);
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        mix64(self.state)
    }
}
