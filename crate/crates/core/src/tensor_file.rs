//! `ITPT` binary tensor files.
//!
//! All multi-byte fields are little-endian.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "ITPT"
//! 4       2           version (u16) = 1
//! 6       1           dtype: 0 = f32, 1 = packed codes
//! 7       1           rank (u8)
//! 8       4 * rank    dims (u32 each), row-major
//! -- dtype 0 --
//!         4 * n       f32 payload
//! -- dtype 1 --
//!         1           bits (2, 4, 8, 16)
//!         1           axis: 0 = per_channel, 1 = per_token
//!         4           group size (u32), 0 = whole axis
//!         4           group count G (u32)
//!         8 * G       (scale f32, zero point i32) pairs
//!         ceil(n * bits / 8)  packed codes
//! ```
//!
//! Codes are stored as unsigned offsets `code - p_min` in `bits` bits each.
//! Sub-byte codes fill a byte starting from the least significant bits, so
//! the lowest-indexed element sits in bits `0..bits`. 16-bit codes are `u16`
//! little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::quant::{GroupSize, QuantAxis, QuantError, QuantParams, QuantScheme, QuantizedCacheLayer};
use crate::rearrange::{RearrangeError, TokenGrid};
use crate::tensor::{ShapeError, Tensor};

pub const MAGIC: [u8; 4] = *b"ITPT";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_PACKED: u8 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"ITPT\"")]
    Magic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u16),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("unknown quantization axis code {0}")]
    Axis(u8),
    #[error("file truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("expected {expected} tensor, found {found}")]
    Kind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("rank {0} exceeds 255")]
    Rank(usize),
    #[error("dimension {0} exceeds u32")]
    Dim(usize),
    #[error("token grids must be rank 3, got shape {0:?}")]
    GridRank(Vec<usize>),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Grid(#[from] RearrangeError),
}

impl FormatError {
    pub fn is_io(&self) -> bool {
        matches!(self, FormatError::Io { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorFile {
    F32(Tensor),
    Packed(QuantizedCacheLayer),
}

impl TensorFile {
    fn kind(&self) -> &'static str {
        match self {
            TensorFile::F32(_) => "f32",
            TensorFile::Packed(_) => "packed_codes",
        }
    }

    pub fn into_f32(self) -> Result<Tensor, FormatError> {
        match self {
            TensorFile::F32(t) => Ok(t),
            other => Err(FormatError::Kind {
                expected: "f32",
                found: other.kind(),
            }),
        }
    }

    pub fn into_packed(self) -> Result<QuantizedCacheLayer, FormatError> {
        match self {
            TensorFile::Packed(q) => Ok(q),
            other => Err(FormatError::Kind {
                expected: "packed_codes",
                found: other.kind(),
            }),
        }
    }
}

/// Packs codes into `bits`-wide unsigned offsets from `p_min`.
pub fn pack_codes(codes: &[i16], scheme: &QuantScheme) -> Vec<u8> {
    let bits = scheme.bits() as usize;
    let offset = |c: i16| (c as i32 - scheme.p_min()) as u32;
    if bits == 16 {
        return codes.iter().flat_map(|&c| (offset(c) as u16).to_le_bytes()).collect();
    }
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (i, &c) in codes.iter().enumerate() {
        let bit = i * bits;
        out[bit / 8] |= (offset(c) as u8) << (bit % 8);
    }
    out
}

/// Inverse of [`pack_codes`] for `n` codes.
pub fn unpack_codes(bytes: &[u8], n: usize, scheme: &QuantScheme) -> Vec<i16> {
    let bits = scheme.bits() as usize;
    let p_min = scheme.p_min();
    if bits == 16 {
        return bytes
            .chunks_exact(2)
            .take(n)
            .map(|b| (u16::from_le_bytes([b[0], b[1]]) as i32 + p_min) as i16)
            .collect();
    }
    let mask = ((1u32 << bits) - 1) as u8;
    (0..n)
        .map(|i| {
            let bit = i * bits;
            let raw = (bytes[bit / 8] >> (bit % 8)) & mask;
            (raw as i32 + p_min) as i16
        })
        .collect()
}

fn push_header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) -> Result<(), FormatError> {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    let rank = u8::try_from(shape.len()).map_err(|_| FormatError::Rank(shape.len()))?;
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| FormatError::Dim(d))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode(file: &TensorFile) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    match file {
        TensorFile::F32(t) => {
            push_header(&mut out, DTYPE_F32, t.shape())?;
            out.reserve(t.len() * 4);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorFile::Packed(q) => {
            push_header(&mut out, DTYPE_PACKED, q.shape())?;
            let scheme = q.scheme();
            out.push(scheme.bits());
            out.push(match scheme.axis() {
                QuantAxis::PerChannel => 0,
                QuantAxis::PerToken => 1,
            });
            let g = match scheme.group_size() {
                GroupSize::WholeAxis => 0,
                GroupSize::Fixed(g) => u32::try_from(g).map_err(|_| FormatError::Dim(g))?,
            };
            out.extend_from_slice(&g.to_le_bytes());
            let params = q.params();
            let n = u32::try_from(params.len()).map_err(|_| FormatError::Dim(params.len()))?;
            out.extend_from_slice(&n.to_le_bytes());
            for (s, z) in params.scale.iter().zip(&params.zero_point) {
                out.extend_from_slice(&s.to_le_bytes());
                out.extend_from_slice(&z.to_le_bytes());
            }
            out.extend_from_slice(&pack_codes(q.codes(), scheme));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.array()?;
    if magic != MAGIC {
        return Err(FormatError::Magic(magic));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(FormatError::Dim(usize::MAX))?;

    let file = match dtype {
        DTYPE_F32 => {
            let payload = r.take(n.checked_mul(4).ok_or(FormatError::Dim(n))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            TensorFile::F32(Tensor::new(shape, data)?)
        }
        DTYPE_PACKED => {
            let bits = r.u8()?;
            let axis = match r.u8()? {
                0 => QuantAxis::PerChannel,
                1 => QuantAxis::PerToken,
                a => return Err(FormatError::Axis(a)),
            };
            let group_size = match r.u32()? {
                0 => GroupSize::WholeAxis,
                g => GroupSize::Fixed(g as usize),
            };
            let scheme = QuantScheme::new(bits, axis, group_size)?;
            let groups = r.u32()? as usize;
            // Bound the table by what is actually present before allocating.
            let table = r.take(groups.checked_mul(8).ok_or(FormatError::Dim(groups))?)?;
            let (scale, zero_point) = table
                .chunks_exact(8)
                .map(|b| {
                    (
                        f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                        i32::from_le_bytes([b[4], b[5], b[6], b[7]]),
                    )
                })
                .unzip();
            let params = QuantParams::new(scale, zero_point)?;
            let len = n.checked_mul(bits as usize).ok_or(FormatError::Dim(n))?.div_ceil(8);
            let codes = unpack_codes(r.take(len)?, n, &scheme);
            TensorFile::Packed(QuantizedCacheLayer::from_parts(scheme, codes, params, shape)?)
        }
        other => return Err(FormatError::DType(other)),
    };
    let rest = bytes.len() - r.pos;
    if rest != 0 {
        return Err(FormatError::Trailing(rest));
    }
    Ok(file)
}

pub fn read_path(path: &Path) -> Result<TensorFile, FormatError> {
    let bytes = fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub fn write_path(path: &Path, file: &TensorFile) -> Result<(), FormatError> {
    let bytes = encode(file)?;
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a rank-3 f32 tensor as a [`TokenGrid`].
pub fn read_grid(path: &Path) -> Result<TokenGrid, FormatError> {
    let t = read_path(path)?.into_f32()?;
    grid_from_tensor(t)
}

pub fn grid_from_tensor(t: Tensor) -> Result<TokenGrid, FormatError> {
    match *t.shape() {
        [f, k, d] => Ok(TokenGrid::new(f, k, d, t.into_data())?),
        _ => Err(FormatError::GridRank(t.shape().to_vec())),
    }
}

pub fn write_grid(path: &Path, grid: &TokenGrid) -> Result<(), FormatError> {
    write_path(path, &TensorFile::F32(grid.clone().into()))
}
