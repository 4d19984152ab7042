//! Counter-based random stream: output `i` of a stream is a pure function of
//! the stream key and `i`, so streams can be keyed by (seed, meta-analysis,
//! study) and generated in any order.

use rand::RngCore;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stream key from a seed and a path of integer labels.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed ^ GAMMA), |k, &p| mix(k ^ mix(p.wrapping_add(GAMMA))))
}

/// FNV-1a hash of a string label, stable across platforms and releases.
pub fn label_hash(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, path: &[u64]) -> Self {
        CounterRng { key: derive_key(seed, path), counter: 0 }
    }

    /// The `i`-th output of the stream, independent of the cursor.
    pub fn at(&self, i: u64) -> u64 {
        mix(self.key.wrapping_add(mix(i.wrapping_mul(GAMMA))))
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        for chunk in dest.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
