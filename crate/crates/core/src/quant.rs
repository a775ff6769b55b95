//! Post-training asymmetric uniform quantization for KV-cache tensors.
//!
//! The quantize/dequantize pair composes to
//!
//! ```text
//! x_hat = S * (clamp(round(x / S) - Z, p_min, p_max) + Z)
//! ```
//!
//! with `round` = round-half-to-even. `Z` shifts the clamp window rather
//! than the code origin; substituting `Z -> -Z` gives the more familiar
//! `q = clamp(round(x / S) + Z)` / `x_hat = S * (q - Z)` form.
//!
//! Calibration is min-max: for each group `S = (max - min) / (p_max - p_min)`
//! and `Z = round(min / S) - p_min`, which maps `min` onto `p_min` and keeps
//! every value in `[min, max]` within `S / 2` of its reconstruction.
//!
//! Tensors are viewed as `[rows, cols]` (last dimension = channels, leading
//! dimensions = tokens). Grouping:
//!
//! | axis          | whole axis      | `group_size = g`                       |
//! |---------------|-----------------|----------------------------------------|
//! | `PerChannel`  | one per column  | per column, chunks of `g` rows         |
//! | `PerToken`    | one per row     | per row, chunks of `g` columns         |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("unsupported bit width {0} (expected 2, 4, 8 or 16)")]
    Bits(u8),
    #[error("group size must be positive")]
    ZeroGroup,
    #[error("calibration needs at least one sample")]
    NoSamples,
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("sample {index} has shape {got:?}, incompatible with {expected:?}")]
    SampleShape {
        index: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameters cover {params} groups, tensor layout has {groups}")]
    GroupMismatch { params: usize, groups: usize },
    #[error("code {code} at index {index} outside [{min}, {max}]")]
    CodeRange {
        index: usize,
        code: i32,
        min: i32,
        max: i32,
    },
    #[error("scale {0} must be finite and positive")]
    Scale(f32),
    #[error("row has {got} columns, layer has {expected}")]
    RowWidth { expected: usize, got: usize },
    #[error("row appends need per-token grouping or whole-axis per-channel grouping")]
    RowAppend,
    #[error("{0}")]
    Shape(#[from] crate::tensor::ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantAxis {
    PerChannel,
    PerToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupSize {
    #[default]
    WholeAxis,
    Fixed(usize),
}

/// Bit width, grouping and the integer code range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantScheme {
    bits: u8,
    axis: QuantAxis,
    group_size: GroupSize,
    p_min: i32,
    p_max: i32,
}

impl QuantScheme {
    pub fn new(bits: u8, axis: QuantAxis, group_size: GroupSize) -> Result<Self, QuantError> {
        if !matches!(bits, 2 | 4 | 8 | 16) {
            return Err(QuantError::Bits(bits));
        }
        if group_size == GroupSize::Fixed(0) {
            return Err(QuantError::ZeroGroup);
        }
        let half = 1i32 << (bits - 1);
        Ok(Self {
            bits,
            axis,
            group_size,
            p_min: -half,
            p_max: half - 1,
        })
    }

    /// Default key scheme: whole-axis per-channel.
    pub fn keys(bits: u8) -> Result<Self, QuantError> {
        Self::new(bits, QuantAxis::PerChannel, GroupSize::WholeAxis)
    }

    /// Default value scheme: whole-axis per-token.
    pub fn values(bits: u8) -> Result<Self, QuantError> {
        Self::new(bits, QuantAxis::PerToken, GroupSize::WholeAxis)
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn axis(&self) -> QuantAxis {
        self.axis
    }

    pub fn group_size(&self) -> GroupSize {
        self.group_size
    }

    pub fn p_min(&self) -> i32 {
        self.p_min
    }

    pub fn p_max(&self) -> i32 {
        self.p_max
    }

    /// Number of quantization bins, `2^bits`.
    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    /// Group layout of a `[rows, cols]` matrix under this scheme.
    pub fn layout(&self, rows: usize, cols: usize) -> GroupLayout {
        GroupLayout {
            rows,
            cols,
            axis: self.axis,
            group_size: self.group_size,
        }
    }
}

/// Maps matrix elements to quantization groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    rows: usize,
    cols: usize,
    axis: QuantAxis,
    group_size: GroupSize,
}

impl GroupLayout {
    pub fn num_groups(&self) -> usize {
        match (self.axis, self.group_size) {
            (QuantAxis::PerChannel, GroupSize::WholeAxis) => self.cols,
            (QuantAxis::PerChannel, GroupSize::Fixed(g)) => self.rows.div_ceil(g) * self.cols,
            (QuantAxis::PerToken, GroupSize::WholeAxis) => self.rows,
            (QuantAxis::PerToken, GroupSize::Fixed(g)) => self.rows * self.cols.div_ceil(g),
        }
    }

    pub fn group_of(&self, row: usize, col: usize) -> usize {
        match (self.axis, self.group_size) {
            (QuantAxis::PerChannel, GroupSize::WholeAxis) => col,
            (QuantAxis::PerChannel, GroupSize::Fixed(g)) => (row / g) * self.cols + col,
            (QuantAxis::PerToken, GroupSize::WholeAxis) => row,
            (QuantAxis::PerToken, GroupSize::Fixed(g)) => row * self.cols.div_ceil(g) + col / g,
        }
    }

    /// Whether group membership depends on the row count.
    fn depends_on_rows(&self) -> bool {
        !matches!(
            (self.axis, self.group_size),
            (QuantAxis::PerChannel, GroupSize::WholeAxis)
        )
    }

    fn for_each_group<F: FnMut(usize, usize)>(&self, mut f: F) {
        for r in 0..self.rows {
            for c in 0..self.cols {
                f(r * self.cols + c, self.group_of(r, c));
            }
        }
    }
}

/// One `(S, Z)` pair per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f32>,
    pub zero_point: Vec<i32>,
}

impl QuantParams {
    pub fn new(scale: Vec<f32>, zero_point: Vec<i32>) -> Result<Self, QuantError> {
        if scale.len() != zero_point.len() {
            return Err(QuantError::GroupMismatch {
                params: scale.len(),
                groups: zero_point.len(),
            });
        }
        if let Some(&s) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(QuantError::Scale(s));
        }
        Ok(Self { scale, zero_point })
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    fn extend(&mut self, other: QuantParams) {
        self.scale.extend(other.scale);
        self.zero_point.extend(other.zero_point);
    }
}

/// Integer codes plus the parameters needed to reconstruct them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCacheLayer {
    scheme: QuantScheme,
    codes: Vec<i16>,
    params: QuantParams,
    shape: Vec<usize>,
}

/// Round half to even, the `⌊·⌉` of the quantizer.
#[inline]
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Code for one value under `(scale, zero_point)`.
#[inline]
pub fn quantize_value(x: f32, scale: f32, zero_point: i32, scheme: &QuantScheme) -> i16 {
    let shifted = round_half_even(x as f64 / scale as f64) - zero_point as f64;
    shifted.clamp(scheme.p_min as f64, scheme.p_max as f64) as i16
}

#[inline]
pub fn dequantize_value(code: i16, scale: f32, zero_point: i32) -> f32 {
    (scale as f64 * (code as i64 + zero_point as i64) as f64) as f32
}

/// Smallest scale allowed for a group whose largest magnitude is `max_abs`.
///
/// Relative to the data so `min / S` stays within `2^24` and a constant group
/// reconstructs exactly.
fn scale_floor(max_abs: f64) -> f64 {
    if max_abs > 0.0 {
        max_abs * (2.0f64).powi(-24)
    } else {
        f32::MIN_POSITIVE as f64
    }
}

fn check_finite(data: &[f32]) -> Result<(), QuantError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(QuantError::NonFinite {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}

/// Min-max calibration over one or more sample tensors.
pub fn calibrate(samples: &[Tensor], scheme: &QuantScheme) -> Result<QuantParams, QuantError> {
    let first = samples.first().ok_or(QuantError::NoSamples)?;
    let (rows, cols) = first.as_matrix();
    let layout = scheme.layout(rows, cols);
    let n = layout.num_groups();
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];

    for (index, sample) in samples.iter().enumerate() {
        let (r, c) = sample.as_matrix();
        let compatible = c == cols && (r == rows || !layout.depends_on_rows());
        if !compatible {
            return Err(QuantError::SampleShape {
                index,
                expected: first.shape().to_vec(),
                got: sample.shape().to_vec(),
            });
        }
        check_finite(sample.data())?;
        let data = sample.data();
        scheme.layout(r, c).for_each_group(|i, g| {
            let v = data[i] as f64;
            lo[g] = lo[g].min(v);
            hi[g] = hi[g].max(v);
        });
    }

    let span = (scheme.p_max - scheme.p_min) as f64;
    let mut scale = Vec::with_capacity(n);
    let mut zero_point = Vec::with_capacity(n);
    for (&min, &max) in lo.iter().zip(&hi) {
        // Groups that received no elements (ragged chunk layouts) get a unit scale.
        let (min, max) = if min.is_finite() { (min, max) } else { (0.0, 0.0) };
        let floor = scale_floor(min.abs().max(max.abs()));
        let s = ((max - min) / span).max(floor) as f32;
        let z = round_half_even(min / s as f64) - scheme.p_min as f64;
        scale.push(s);
        zero_point.push(z as i32);
    }
    QuantParams::new(scale, zero_point)
}

/// Quantizes `tensor` with pre-computed parameters.
pub fn quantize(
    tensor: &Tensor,
    params: &QuantParams,
    scheme: &QuantScheme,
) -> Result<QuantizedCacheLayer, QuantError> {
    let (rows, cols) = tensor.as_matrix();
    let layout = scheme.layout(rows, cols);
    if layout.num_groups() != params.len() {
        return Err(QuantError::GroupMismatch {
            params: params.len(),
            groups: layout.num_groups(),
        });
    }
    check_finite(tensor.data())?;
    let data = tensor.data();
    let mut codes = vec![0i16; data.len()];
    layout.for_each_group(|i, g| {
        codes[i] = quantize_value(data[i], params.scale[g], params.zero_point[g], scheme);
    });
    Ok(QuantizedCacheLayer {
        scheme: *scheme,
        codes,
        params: params.clone(),
        shape: tensor.shape().to_vec(),
    })
}

/// Reconstructs the real tensor from its codes.
pub fn dequantize(layer: &QuantizedCacheLayer) -> Result<Tensor, QuantError> {
    layer.check_codes()?;
    let (rows, cols) = layer.matrix();
    let mut out = vec![0f32; layer.codes.len()];
    layer.scheme.layout(rows, cols).for_each_group(|i, g| {
        out[i] = dequantize_value(layer.codes[i], layer.params.scale[g], layer.params.zero_point[g]);
    });
    Ok(Tensor::new(layer.shape.clone(), out)?)
}

impl QuantizedCacheLayer {
    /// Assembles a layer from stored parts, validating code range and group count.
    pub fn from_parts(
        scheme: QuantScheme,
        codes: Vec<i16>,
        params: QuantParams,
        shape: Vec<usize>,
    ) -> Result<Self, QuantError> {
        let expected: usize = shape.iter().product();
        if expected != codes.len() {
            return Err(crate::tensor::ShapeError {
                shape,
                expected,
                got: codes.len(),
            }
            .into());
        }
        let layer = Self {
            scheme,
            codes,
            params,
            shape,
        };
        let (rows, cols) = layer.matrix();
        let groups = scheme.layout(rows, cols).num_groups();
        if groups != layer.params.len() {
            return Err(QuantError::GroupMismatch {
                params: layer.params.len(),
                groups,
            });
        }
        layer.check_codes()?;
        Ok(layer)
    }

    /// Empty `[0, cols]` layer that grows with [`push_row`](Self::push_row).
    ///
    /// Per-channel layers take their fixed parameters up front; per-token
    /// layers start without parameters and calibrate each appended row.
    pub fn with_columns(
        scheme: QuantScheme,
        cols: usize,
        channel_params: Option<QuantParams>,
    ) -> Result<Self, QuantError> {
        let params = match (scheme.axis, scheme.group_size) {
            (QuantAxis::PerChannel, GroupSize::WholeAxis) => {
                let p = channel_params.ok_or(QuantError::GroupMismatch {
                    params: 0,
                    groups: cols,
                })?;
                if p.len() != cols {
                    return Err(QuantError::GroupMismatch {
                        params: p.len(),
                        groups: cols,
                    });
                }
                p
            }
            (QuantAxis::PerToken, _) => QuantParams {
                scale: Vec::new(),
                zero_point: Vec::new(),
            },
            (QuantAxis::PerChannel, GroupSize::Fixed(_)) => return Err(QuantError::RowAppend),
        };
        Ok(Self {
            scheme,
            codes: Vec::new(),
            params,
            shape: vec![0, cols],
        })
    }

    /// Appends one token row to a layer created by [`with_columns`](Self::with_columns).
    pub fn push_row(&mut self, row: &[f32]) -> Result<(), QuantError> {
        let (rows, cols) = self.matrix();
        if row.len() != cols || self.shape.len() != 2 {
            return Err(QuantError::RowWidth {
                expected: cols,
                got: row.len(),
            });
        }
        let single = Tensor::new(vec![1, cols], row.to_vec())?;
        let params = match self.scheme.axis {
            QuantAxis::PerToken => calibrate(std::slice::from_ref(&single), &self.scheme)?,
            QuantAxis::PerChannel => self.params.clone(),
        };
        let q = quantize(&single, &params, &self.scheme)?;
        self.codes.extend_from_slice(&q.codes);
        if self.scheme.axis == QuantAxis::PerToken {
            self.params.extend(params);
        }
        self.shape[0] = rows + 1;
        Ok(())
    }

    /// Dequantized copy of one row.
    pub fn row(&self, index: usize) -> Vec<f32> {
        let (_, cols) = self.matrix();
        let layout = self.scheme.layout(self.matrix().0, cols);
        (0..cols)
            .map(|c| {
                let g = layout.group_of(index, c);
                dequantize_value(
                    self.codes[index * cols + c],
                    self.params.scale[g],
                    self.params.zero_point[g],
                )
            })
            .collect()
    }

    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn codes(&self) -> &[i16] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.matrix().0
    }

    fn matrix(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&cols, lead)) => (lead.iter().product(), cols),
        }
    }

    fn check_codes(&self) -> Result<(), QuantError> {
        let (min, max) = (self.scheme.p_min, self.scheme.p_max);
        match self.codes.iter().position(|&c| (c as i32) < min || (c as i32) > max) {
            Some(index) => Err(QuantError::CodeRange {
                index,
                code: self.codes[index] as i32,
                min,
                max,
            }),
            None => Ok(()),
        }
    }

    /// Code storage in bits, excluding the `(S, Z)` table.
    pub fn payload_bits(&self) -> usize {
        self.codes.len() * self.scheme.bits as usize
    }

    /// Bytes used by the `(S, Z)` table (f32 + i32 per group).
    pub fn metadata_bytes(&self) -> usize {
        self.params.len() * 8
    }
}

/// Round-trip error statistics over a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorStats {
    pub max_abs: f64,
    pub mean_abs: f64,
}

pub fn error_stats(original: &Tensor, reconstructed: &Tensor) -> ErrorStats {
    let n = original.len().max(1) as f64;
    let (max_abs, sum) = original
        .data()
        .iter()
        .zip(reconstructed.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold((0.0f64, 0.0f64), |(m, s), e| (m.max(e), s + e));
    ErrorStats {
        max_abs,
        mean_abs: sum / n,
    }
}
