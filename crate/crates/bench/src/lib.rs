//! Shared inputs for the criterion benches.

use vidintp_core::rearrange::{plan_subsequences, MockEncoder, RearrangePlan, TokenGrid};
use vidintp_core::rng::CounterRng;
use vidintp_core::Tensor;

/// Deterministic values in `[-scale, scale)`.
pub fn values(seed: u64, n: usize, scale: f32) -> Vec<f32> {
    let rng = CounterRng::new(seed, 0);
    (0..n as u64).map(|i| rng.uniform(i) as f32 * scale).collect()
}

/// KV-cache shaped tensor: `tokens` rows of `hidden` channels.
pub fn kv_tensor(seed: u64, tokens: usize, hidden: usize) -> Tensor {
    Tensor::new(vec![tokens, hidden], values(seed, tokens * hidden, 4.0)).expect("shape matches data")
}

/// Encoder outputs for `total` frames split into `capacity`-frame passes.
pub fn encoded_groups(total: usize, capacity: usize, tokens: usize, dim: usize) -> (RearrangePlan, Vec<TokenGrid>) {
    let plan = plan_subsequences(total, capacity).expect("capacity divides total");
    let enc = MockEncoder::new(1, tokens, dim);
    let groups = plan
        .subsequences
        .iter()
        .map(|frames| enc.encode(frames).expect("frames are 1-based"))
        .collect();
    (plan, groups)
}
