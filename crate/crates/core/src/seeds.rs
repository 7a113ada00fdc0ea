//! Seed splitting.
//!
//! Every random stream in the crate is derived from one root seed. A stream
//! is named by a label (for example `"init"`, `"shuffle"`, `"dropout"`) and an
//! optional index (epoch, batch, MC pass). The derived seed is
//!
//! ```text
//! splitmix64(splitmix64(root ^ fnv1a64(label)) ^ index)
//! ```
//!
//! which keeps streams independent and makes each one reproducible on its
//! own, regardless of the order in which they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for the stream `label` under `root`.
pub fn derive(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a64(label))
}

/// Seed for element `index` of the stream `label` under `root`.
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(root, label) ^ index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
