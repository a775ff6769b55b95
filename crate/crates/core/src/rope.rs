//! Rotary position embeddings with context-window extension.
//!
//! Frequencies use the 0-based index convention `theta_d = base^(-2d/head_dim)`
//! for `d in 0..head_dim/2`, so `theta_0 == 1` and the first rotation pair
//! spins fastest. Rotations act on adjacent pairs `(2d, 2d + 1)`, not on the
//! split-halves layout used by some checkpoints.
//!
//! Two extension modes stretch a model pretrained on `pretrained_window`
//! positions to `target_window` positions:
//!
//! * [`ScalingMode::LinearInterpolation`] compresses position indices by
//!   `pretrained_window / target_window` (fractional positions are kept).
//! * [`ScalingMode::NtkAware`] leaves positions alone and enlarges the base to
//!   `base * s^(head_dim / (head_dim - 2))` with `s = target / pretrained`.
//!
//! Frequencies are computed in `f64`. [`apply_rotation`] is generic over the
//! float type so callers can rotate in their tensor's native precision.

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default RoPE base used by Llama-family backbones.
pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RopeError {
    #[error("head_dim must be even and >= 2, got {0}")]
    OddHeadDim(usize),
    #[error("NTK-aware scaling needs head_dim > 2, got {0}")]
    NtkHeadDim(usize),
    #[error("base must be finite and > 1, got {0}")]
    Base(f64),
    #[error("pretrained_window must be positive")]
    ZeroWindow,
    #[error("target_window {target} is smaller than pretrained_window {pretrained}")]
    WindowShrink { pretrained: usize, target: usize },
    #[error("vector length {got} does not match frequency table ({expected} values)")]
    LengthMismatch { expected: usize, got: usize },
}

/// How positions beyond the pretrained window are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Plain RoPE; positions and base untouched.
    None,
    /// Position interpolation: `m -> m * L / L'`.
    LinearInterpolation,
    /// Base rescaling: `b -> b * s^(D / (D - 2))`.
    #[default]
    NtkAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeConfig {
    pub base: f64,
    pub head_dim: usize,
    pub pretrained_window: usize,
    pub target_window: usize,
    pub mode: ScalingMode,
}

impl RopeConfig {
    /// Validated constructor.
    pub fn new(
        base: f64,
        head_dim: usize,
        pretrained_window: usize,
        target_window: usize,
        mode: ScalingMode,
    ) -> Result<Self, RopeError> {
        let cfg = Self {
            base,
            head_dim,
            pretrained_window,
            target_window,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unscaled RoPE over a single window.
    pub fn plain(head_dim: usize, window: usize) -> Result<Self, RopeError> {
        Self::new(DEFAULT_BASE, head_dim, window, window, ScalingMode::None)
    }

    pub fn validate(&self) -> Result<(), RopeError> {
        if self.head_dim < 2 || !self.head_dim.is_multiple_of(2) {
            return Err(RopeError::OddHeadDim(self.head_dim));
        }
        if !self.base.is_finite() || self.base <= 1.0 {
            return Err(RopeError::Base(self.base));
        }
        if self.pretrained_window == 0 {
            return Err(RopeError::ZeroWindow);
        }
        if self.target_window < self.pretrained_window {
            return Err(RopeError::WindowShrink {
                pretrained: self.pretrained_window,
                target: self.target_window,
            });
        }
        if self.mode == ScalingMode::NtkAware && self.head_dim <= 2 {
            return Err(RopeError::NtkHeadDim(self.head_dim));
        }
        Ok(())
    }

    /// The scaling ratio `s = L' / L` (always >= 1 for a valid config).
    pub fn scale(&self) -> f64 {
        self.target_window as f64 / self.pretrained_window as f64
    }

    /// Base actually used to build the frequency table for this mode.
    pub fn effective_base(&self) -> Result<f64, RopeError> {
        match self.mode {
            ScalingMode::NtkAware => ntk_base(self),
            ScalingMode::None | ScalingMode::LinearInterpolation => Ok(self.base),
        }
    }
}

/// Per-pair angular frequencies `theta_d`, `d = 0..head_dim/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    theta: Vec<f64>,
}

impl FrequencyTable {
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Width of the vectors this table rotates.
    pub fn head_dim(&self) -> usize {
        2 * self.theta.len()
    }
}

/// A query or key vector tagged with its (possibly fractional) position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionedVector<T> {
    pub values: Vec<T>,
    pub position: f64,
}

impl<T> PositionedVector<T> {
    pub fn new(values: Vec<T>, position: f64) -> Self {
        Self { values, position }
    }
}

/// Builds the frequency table for `config`, applying the NTK base when that
/// mode is selected.
pub fn compute_frequencies(config: &RopeConfig) -> Result<FrequencyTable, RopeError> {
    config.validate()?;
    let base = config.effective_base()?;
    Ok(frequencies_for_base(base, config.head_dim))
}

fn frequencies_for_base(base: f64, head_dim: usize) -> FrequencyTable {
    let half = head_dim / 2;
    let ln_base = base.ln();
    let theta = (0..half)
        .map(|d| (-(2.0 * d as f64 / head_dim as f64) * ln_base).exp())
        .collect();
    FrequencyTable { theta }
}

/// NTK-aware base `b * s^(D / (D - 2))`.
///
/// Returns `base` itself when `s == 1`. Only meaningful for
/// [`ScalingMode::NtkAware`] but computed for any valid config so callers can
/// inspect the value.
pub fn ntk_base(config: &RopeConfig) -> Result<f64, RopeError> {
    if config.head_dim <= 2 {
        return Err(RopeError::NtkHeadDim(config.head_dim));
    }
    let d = config.head_dim as f64;
    let s = config.scale();
    Ok(config.base * s.powf(d / (d - 2.0)))
}

/// Maps an integer token index to the position fed to the rotation.
///
/// Linear interpolation returns `m * L / L'`; the other modes return `m`.
pub fn interpolate_position(m: usize, config: &RopeConfig) -> f64 {
    match config.mode {
        ScalingMode::LinearInterpolation => m as f64 * config.pretrained_window as f64 / config.target_window as f64,
        ScalingMode::None | ScalingMode::NtkAware => m as f64,
    }
}

/// Applies the block-diagonal rotation to `v` at `v.position`.
pub fn apply_rotation<T: Float>(v: &PositionedVector<T>, freqs: &FrequencyTable) -> Result<Vec<T>, RopeError> {
    let mut out = v.values.clone();
    rotate_in_place(&mut out, v.position, freqs)?;
    Ok(out)
}

/// In-place variant of [`apply_rotation`] for hot loops.
pub fn rotate_in_place<T: Float>(values: &mut [T], position: f64, freqs: &FrequencyTable) -> Result<(), RopeError> {
    if values.len() != freqs.head_dim() {
        return Err(RopeError::LengthMismatch {
            expected: freqs.head_dim(),
            got: values.len(),
        });
    }
    for (pair, &theta) in values.chunks_exact_mut(2).zip(&freqs.theta) {
        let (sin, cos) = (position * theta).sin_cos();
        let (sin, cos) = (cast::<T>(sin), cast::<T>(cos));
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
    Ok(())
}

fn cast<T: Float>(x: f64) -> T {
    T::from(x).expect("finite f64 converts to any Float")
}
