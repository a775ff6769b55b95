//! Counter-based pseudo-random values.
//!
//! `value(i) = splitmix64(key ^ splitmix64(i))` where `key` mixes the seed and
//! a stream id. Any element can be generated independently of the others, so
//! weight tensors are reproducible regardless of initialization order.

/// Stateless generator keyed by `(seed, stream)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            key: splitmix64(seed ^ splitmix64(stream.wrapping_mul(GOLDEN))),
        }
    }

    pub fn bits(&self, counter: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(counter))
    }

    /// Uniform in `[-1, 1)` with 53 bits of resolution.
    pub fn uniform(&self, counter: u64) -> f64 {
        let unit = (self.bits(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        2.0 * unit - 1.0
    }
}
