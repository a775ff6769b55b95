//! Training-free building blocks for stretching a video LLM to longer clips.
//!
//! * [`rearrange`]: split `m * N` frames into `m` stride-`m` subsequences for a
//!   fixed `N`-frame encoder and merge the token groups back in time order.
//! * [`rope`]: rotary position embeddings with linear position interpolation
//!   and NTK-aware base rescaling.
//! * [`quant`]: min-max calibrated asymmetric quantization of KV-cache tensors.
//! * [`decoder`]: a small randomly initialized decoder wiring the above into a
//!   KV-cached attention loop.
//! * [`roofline`]: memory-bound decode cost model (OPs, latency, memory, KV size).
//! * [`tensor_file`]: the `ITPT` binary tensor format.

pub mod decoder;
pub mod quant;
pub mod rearrange;
pub mod rng;
pub mod roofline;
pub mod rope;
pub mod tensor;
pub mod tensor_file;

pub use decoder::{CacheMode, Decoded, Decoder, DecoderError, DecoderSpec, KvCache, KvQuantizer, Prompt};
pub use quant::{GroupSize, QuantAxis, QuantError, QuantParams, QuantScheme, QuantizedCacheLayer};
pub use rearrange::{RearrangeError, RearrangePlan, TokenGrid};
pub use roofline::{CostReport, HardwareSpec, ModelSpec};
pub use rope::{FrequencyTable, PositionedVector, RopeConfig, RopeError, ScalingMode};
pub use tensor::Tensor;
pub use tensor_file::{FormatError, TensorFile};
