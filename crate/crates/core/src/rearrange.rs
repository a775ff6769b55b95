//! Strided frame decomposition and chronological token re-interleaving.
//!
//! A frozen video encoder accepts `N` frames. To feed it `m * N` frames the
//! video is split into `m` subsequences; subsequence `i` (1-based) holds frames
//! `i, m + i, 2m + i, ..., mN - m + i`. Each subsequence is encoded on its own
//! and the resulting per-frame token blocks are merged back by absolute frame
//! index, so the final sequence is in strict chronological order.
//!
//! Frame indices are 1-based throughout this module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Visual tokens per frame in the Video-LLaVA configuration.
pub const DEFAULT_TOKENS_PER_FRAME: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RearrangeError {
    #[error("encoder capacity must be positive")]
    ZeroCapacity,
    #[error("total frames must be positive")]
    ZeroFrames,
    #[error("{total} frames are not divisible by encoder capacity {capacity}")]
    NotDivisible { total: usize, capacity: usize },
    #[error("plan expects {expected} token groups, got {got}")]
    GroupCount { expected: usize, got: usize },
    #[error("group {group} has shape {got:?}, expected {expected:?}")]
    GroupShape {
        group: usize,
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("grid has {got} frames, plan covers {expected}")]
    FrameCount { expected: usize, got: usize },
    #[error("token grid data length {got} does not match {frames}x{tokens}x{dim}")]
    DataLength {
        frames: usize,
        tokens: usize,
        dim: usize,
        got: usize,
    },
    #[error("token grid dimensions must be positive")]
    EmptyGrid,
    #[error("cannot sample {count} frames from a {length}-frame video")]
    SampleCount { count: usize, length: usize },
}

/// Partition of `total_frames` into `multiplier` stride-`multiplier` subsequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RearrangePlan {
    pub total_frames: usize,
    pub encoder_capacity: usize,
    pub multiplier: usize,
    pub subsequences: Vec<Vec<usize>>,
}

impl RearrangePlan {
    /// Subsequence index (0-based) and slot within it for absolute frame `f`.
    pub fn locate(&self, frame: usize) -> (usize, usize) {
        let zero = frame - 1;
        (zero % self.multiplier, zero / self.multiplier)
    }
}

/// Builds the stride partition for `total_frames` frames and an encoder that
/// takes `encoder_capacity` frames per pass.
pub fn plan_subsequences(total_frames: usize, encoder_capacity: usize) -> Result<RearrangePlan, RearrangeError> {
    if encoder_capacity == 0 {
        return Err(RearrangeError::ZeroCapacity);
    }
    if total_frames == 0 {
        return Err(RearrangeError::ZeroFrames);
    }
    if !total_frames.is_multiple_of(encoder_capacity) {
        return Err(RearrangeError::NotDivisible {
            total: total_frames,
            capacity: encoder_capacity,
        });
    }
    let m = total_frames / encoder_capacity;
    let subsequences = (1..=m)
        .map(|i| (0..encoder_capacity).map(|k| k * m + i).collect())
        .collect();
    Ok(RearrangePlan {
        total_frames,
        encoder_capacity,
        multiplier: m,
        subsequences,
    })
}

/// Dense `[frames x tokens_per_frame x dim]` block of visual tokens, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    frames: usize,
    tokens_per_frame: usize,
    dim: usize,
    data: Vec<f32>,
}

impl TokenGrid {
    pub fn new(frames: usize, tokens_per_frame: usize, dim: usize, data: Vec<f32>) -> Result<Self, RearrangeError> {
        if frames == 0 || tokens_per_frame == 0 || dim == 0 {
            return Err(RearrangeError::EmptyGrid);
        }
        if data.len() != frames * tokens_per_frame * dim {
            return Err(RearrangeError::DataLength {
                frames,
                tokens: tokens_per_frame,
                dim,
                got: data.len(),
            });
        }
        Ok(Self {
            frames,
            tokens_per_frame,
            dim,
            data,
        })
    }

    pub fn zeros(frames: usize, tokens_per_frame: usize, dim: usize) -> Result<Self, RearrangeError> {
        Self::new(
            frames,
            tokens_per_frame,
            dim,
            vec![0.0; frames * tokens_per_frame * dim],
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.tokens_per_frame, self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn block_len(&self) -> usize {
        self.tokens_per_frame * self.dim
    }

    /// Token block for frame `index` (0-based position inside this grid).
    pub fn frame(&self, index: usize) -> &[f32] {
        let n = self.block_len();
        &self.data[index * n..(index + 1) * n]
    }

    /// Iterates over tokens frame-major, each a `dim`-length slice.
    pub fn tokens(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    /// Stacks grids along the frame axis.
    pub fn concat(grids: &[TokenGrid]) -> Result<TokenGrid, RearrangeError> {
        let first = grids.first().ok_or(RearrangeError::EmptyGrid)?;
        let mut data = Vec::new();
        let mut frames = 0;
        for (g, grid) in grids.iter().enumerate() {
            if (grid.tokens_per_frame, grid.dim) != (first.tokens_per_frame, first.dim) {
                return Err(RearrangeError::GroupShape {
                    group: g,
                    expected: (grid.frames, first.tokens_per_frame, first.dim),
                    got: grid.shape(),
                });
            }
            frames += grid.frames;
            data.extend_from_slice(&grid.data);
        }
        TokenGrid::new(frames, first.tokens_per_frame, first.dim, data)
    }

    /// Splits a stacked grid into consecutive chunks of `frames_per_chunk` frames.
    pub fn chunk_frames(&self, frames_per_chunk: usize) -> Result<Vec<TokenGrid>, RearrangeError> {
        if frames_per_chunk == 0 {
            return Err(RearrangeError::ZeroCapacity);
        }
        if !self.frames.is_multiple_of(frames_per_chunk) {
            return Err(RearrangeError::NotDivisible {
                total: self.frames,
                capacity: frames_per_chunk,
            });
        }
        let n = frames_per_chunk * self.block_len();
        self.data
            .chunks_exact(n)
            .map(|c| TokenGrid::new(frames_per_chunk, self.tokens_per_frame, self.dim, c.to_vec()))
            .collect()
    }
}

/// Merges per-subsequence token groups back into chronological frame order.
///
/// `groups[i]` must hold the encoder output for `plan.subsequences[i]`, one
/// frame block per entry in that subsequence.
pub fn interleave_tokens(groups: &[TokenGrid], plan: &RearrangePlan) -> Result<TokenGrid, RearrangeError> {
    if groups.len() != plan.multiplier {
        return Err(RearrangeError::GroupCount {
            expected: plan.multiplier,
            got: groups.len(),
        });
    }
    let first = &groups[0];
    let expected = (plan.encoder_capacity, first.tokens_per_frame, first.dim);
    for (g, grid) in groups.iter().enumerate() {
        if grid.shape() != expected {
            return Err(RearrangeError::GroupShape {
                group: g,
                expected,
                got: grid.shape(),
            });
        }
    }
    let block = first.block_len();
    let mut data = Vec::with_capacity(plan.total_frames * block);
    for frame in 1..=plan.total_frames {
        let (group, slot) = plan.locate(frame);
        data.extend_from_slice(groups[group].frame(slot));
    }
    TokenGrid::new(plan.total_frames, first.tokens_per_frame, first.dim, data)
}

/// Inverse of [`interleave_tokens`]: gathers the frames of each subsequence
/// out of a chronologically ordered grid.
pub fn split_by_plan(grid: &TokenGrid, plan: &RearrangePlan) -> Result<Vec<TokenGrid>, RearrangeError> {
    if grid.frames != plan.total_frames {
        return Err(RearrangeError::FrameCount {
            expected: plan.total_frames,
            got: grid.frames,
        });
    }
    plan.subsequences
        .iter()
        .map(|frames| {
            let mut data = Vec::with_capacity(frames.len() * grid.block_len());
            for &f in frames {
                data.extend_from_slice(grid.frame(f - 1));
            }
            TokenGrid::new(frames.len(), grid.tokens_per_frame, grid.dim, data)
        })
        .collect()
}

/// Picks `count` frame indices (1-based) spread uniformly over a video of
/// `video_length` frames, taking the centre of each of `count` equal strata:
/// `floor((j + 0.5) * video_length / count) + 1`.
pub fn sample_frame_indices(video_length: usize, count: usize) -> Result<Vec<usize>, RearrangeError> {
    if count == 0 || count > video_length {
        return Err(RearrangeError::SampleCount {
            count,
            length: video_length,
        });
    }
    // Integer form of the stratum centre keeps the result exact:
    // floor((2j + 1) * len / (2 * count)).
    Ok((0..count)
        .map(|j| (2 * j + 1) * video_length / (2 * count) + 1)
        .collect())
}

/// Stand-in for the frozen encoder and projector.
///
/// Each frame's token block is a deterministic pseudo-random function of
/// `(seed, absolute frame index)`, so encoding a frame is independent of which
/// subsequence it travels in.
#[derive(Debug, Clone, Copy)]
pub struct MockEncoder {
    pub seed: u64,
    pub tokens_per_frame: usize,
    pub dim: usize,
}

impl MockEncoder {
    pub fn new(seed: u64, tokens_per_frame: usize, dim: usize) -> Self {
        Self {
            seed,
            tokens_per_frame,
            dim,
        }
    }

    /// Encodes the listed (1-based) frames into a grid in list order.
    pub fn encode(&self, frames: &[usize]) -> Result<TokenGrid, RearrangeError> {
        let n = self.tokens_per_frame * self.dim;
        let mut data = Vec::with_capacity(frames.len() * n);
        for &f in frames {
            let stream = crate::rng::CounterRng::new(self.seed, f as u64);
            data.extend((0..n as u64).map(|i| stream.uniform(i) as f32));
        }
        TokenGrid::new(frames.len(), self.tokens_per_frame, self.dim, data)
    }
}
