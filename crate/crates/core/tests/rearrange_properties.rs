use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidintp_core::rearrange::{
    interleave_tokens, plan_subsequences, split_by_plan, MockEncoder, RearrangePlan, TokenGrid,
};

/// Brute-force reference: map each absolute frame to its block, then read
/// blocks back in frame order.
fn oracle_interleave(groups: &[TokenGrid], plan: &RearrangePlan) -> Vec<f32> {
    let mut by_frame: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    for (grid, frames) in groups.iter().zip(&plan.subsequences) {
        for (slot, &f) in frames.iter().enumerate() {
            by_frame.insert(f, grid.frame(slot).to_vec());
        }
    }
    by_frame.into_values().flatten().collect()
}

fn random_grid(rng: &mut ChaCha8Rng, frames: usize, tokens: usize, dim: usize) -> TokenGrid {
    let data = (0..frames * tokens * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TokenGrid::new(frames, tokens, dim, data).unwrap()
}

#[test]
fn interleave_matches_brute_force_for_four_by_eight() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let plan = plan_subsequences(32, 8).unwrap();
    for _ in 0..20 {
        let groups: Vec<TokenGrid> = (0..4).map(|_| random_grid(&mut rng, 8, 5, 3)).collect();
        let out = interleave_tokens(&groups, &plan).unwrap();
        assert_eq!(out.data(), oracle_interleave(&groups, &plan).as_slice());
    }
}

#[test]
fn single_group_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plan = plan_subsequences(6, 6).unwrap();
    let g = random_grid(&mut rng, 6, 4, 2);
    assert_eq!(interleave_tokens(std::slice::from_ref(&g), &plan).unwrap(), g);
}

#[test]
fn mock_encoder_pipeline_equals_dense_encoding() {
    // Encoding each stride subsequence and interleaving must give exactly
    // what a (hypothetical) encoder over all frames at once would give.
    let enc = MockEncoder::new(99, 8, 4);
    for (total, capacity) in [(16, 8), (32, 8), (12, 3), (8, 8)] {
        let plan = plan_subsequences(total, capacity).unwrap();
        let groups: Vec<TokenGrid> = plan
            .subsequences
            .iter()
            .map(|frames| enc.encode(frames).unwrap())
            .collect();
        let merged = interleave_tokens(&groups, &plan).unwrap();
        let dense = enc.encode(&(1..=total).collect::<Vec<_>>()).unwrap();
        assert_eq!(merged, dense);
    }
}

#[test]
fn exhaustive_partition_and_stride() {
    for total in 1..=256usize {
        for capacity in (1..=total).filter(|c| total % c == 0) {
            let plan = plan_subsequences(total, capacity).unwrap();
            let m = plan.multiplier;
            assert_eq!(m * capacity, total);
            let mut seen = vec![false; total + 1];
            for sub in &plan.subsequences {
                assert_eq!(sub.len(), capacity);
                assert!(sub.windows(2).all(|w| w[1] - w[0] == m));
                for &f in sub {
                    assert!(!seen[f], "frame {f} repeated");
                    seen[f] = true;
                }
            }
            assert!(seen[1..].iter().all(|&s| s));
        }
    }
}

proptest! {
    #[test]
    fn split_then_interleave_round_trips(
        capacity in 1usize..9,
        m in 1usize..6,
        tokens in 1usize..5,
        dim in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = capacity * m;
        let plan = plan_subsequences(total, capacity).unwrap();
        let grid = random_grid(&mut rng, total, tokens, dim);
        let groups = split_by_plan(&grid, &plan).unwrap();
        let back = interleave_tokens(&groups, &plan).unwrap();
        prop_assert_eq!(back.data(), grid.data());
    }

    #[test]
    fn stacked_groups_chunk_back(capacity in 1usize..6, m in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups: Vec<TokenGrid> = (0..m).map(|_| random_grid(&mut rng, capacity, 2, 2)).collect();
        let stacked = TokenGrid::concat(&groups).unwrap();
        prop_assert_eq!(stacked.chunk_frames(capacity).unwrap(), groups);
    }
}
