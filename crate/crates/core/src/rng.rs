//! Counter-addressed random streams.
//!
//! Every random tensor is drawn from a stream keyed by `(seed, chunk, step,
//! name)`, so a replay can regenerate exactly the same noise without carrying
//! generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Address of one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub chunk: u64,
    pub step: u64,
}

impl RngCursor {
    pub fn new(seed: u64, chunk: u64, step: u64) -> Self {
        Self { seed, chunk, step }
    }

    /// Generator for the tensor called `name` at this cursor.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        stream(self.seed, self.chunk, self.step, name)
    }

    pub fn normals(&self, name: &str, n: usize) -> Vec<f64> {
        let mut rng = self.stream(name);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the name, mixed with the numeric address.
pub fn stream_key(seed: u64, chunk: u64, step: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(splitmix(seed) ^ chunk) ^ step.rotate_left(17) ^ h)
}

pub fn stream(seed: u64, chunk: u64, step: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, chunk, step, name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_addressed() {
        let a = RngCursor::new(1, 2, 3).normals("noise", 8);
        assert_eq!(a, RngCursor::new(1, 2, 3).normals("noise", 8));
        assert_ne!(a, RngCursor::new(1, 2, 4).normals("noise", 8));
        assert_ne!(a, RngCursor::new(1, 3, 3).normals("noise", 8));
        assert_ne!(a, RngCursor::new(1, 2, 3).normals("other", 8));
    }
}
