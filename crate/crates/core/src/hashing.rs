//! Stable 64-bit hashing and seed derivation.
//!
//! Feature indices, content hashes and RNG streams all go through FNV-1a
//! (64-bit, offset `0xcbf29ce484222325`, prime `0x100000001b3`) so that
//! artifacts are identical across platforms and toolchain versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const FIELD_SEP: u8 = 0x1f;

/// Incremental FNV-1a hasher. Fields pushed with [`Fnv::field`] are
/// separated by a unit-separator byte so `("ab","c")` and `("a","bc")` differ.
#[derive(Clone, Copy, Debug)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(FNV_OFFSET)
    }
}

impl Fnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn field(self, s: &str) -> Self {
        self.bytes(s.as_bytes()).bytes(&[FIELD_SEP])
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    Fnv::new().bytes(bytes).finish()
}

/// Hex rendering used for content hashes in wire formats.
pub fn hash_hex(h: u64) -> String {
    format!("{h:016x}")
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splittable seed. Every (stage, agent, iteration, instruction) path
/// derives its own stream, so results do not depend on evaluation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree(splitmix64(seed))
    }

    pub fn child(self, label: &str) -> Self {
        SeedTree(splitmix64(self.0 ^ Fnv::new().field(label).finish()))
    }

    pub fn index(self, i: u64) -> Self {
        SeedTree(splitmix64(self.0.rotate_left(17) ^ splitmix64(i)))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
