//! Desk-scale autoregressive decoder with a KV cache.
//!
//! Randomly initialized, so it says nothing about model quality; it exists to
//! run RoPE interpolation and KV quantization inside a real attention loop.
//!
//! Architecture: untied token embedding, `layers` pre-norm blocks (RMSNorm,
//! multi-head attention with RoPE on q/k, RMSNorm, `hidden -> 4 hidden ->
//! hidden` MLP with tanh-GELU), final RMSNorm and an LM head. Visual tokens
//! enter as pre-projected embeddings ahead of the text tokens.
//!
//! Weights come from [`CounterRng`] keyed by `(seed, tensor id)`: element `i`
//! of a tensor is `uniform[-1, 1)(i) / sqrt(hidden)`. Norm gains start at 1.

use serde::Serialize;
use thiserror::Error;

use crate::quant::{calibrate, GroupSize, QuantAxis, QuantError, QuantParams, QuantScheme, QuantizedCacheLayer};
use crate::rearrange::TokenGrid;
use crate::rng::CounterRng;
use crate::rope::{compute_frequencies, interpolate_position, rotate_in_place, FrequencyTable, RopeConfig, RopeError};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("invalid decoder spec: {0}")]
    Spec(String),
    #[error("rope head_dim {rope} does not match decoder head_dim {decoder}")]
    HeadDim { rope: usize, decoder: usize },
    #[error("position {position} is outside the target window of {limit} tokens")]
    ContextOverflow { position: usize, limit: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("token id {token} outside vocabulary of {vocab}")]
    Token { token: u32, vocab: usize },
    #[error("embedding has width {got}, decoder hidden size is {expected}")]
    EmbeddingWidth { expected: usize, got: usize },
    #[error("quantizer configured for {got} layers, decoder has {expected}")]
    LayerCount { expected: usize, got: usize },
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<(), DecoderError> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.vocab == 0 {
            return Err(DecoderError::Spec("all sizes must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(DecoderError::Spec(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(DecoderError::Spec(format!("head_dim {} must be even", self.head_dim())));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Dense `out x in` weight matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f32>,
}

impl Linear {
    fn random(out_dim: usize, in_dim: usize, rng: CounterRng, scale: f64) -> Self {
        let weight = (0..(out_dim * in_dim) as u64)
            .map(|i| (rng.uniform(i) * scale) as f32)
            .collect();
        Self {
            out_dim,
            in_dim,
            weight,
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .map(|row| dot(row, x) as f32)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub mlp_norm: Vec<f32>,
    pub w_up: Linear,
    pub w_down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    spec: DecoderSpec,
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Linear,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter()
        .zip(gain)
        .map(|(v, g)| (*v as f64 * inv * *g as f64) as f32)
        .collect()
}

/// tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044_715 * x * x * x)).tanh())) as f32
}

/// Frequency table bundled with its config so each step reuses it.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRope {
    pub config: RopeConfig,
    pub freqs: FrequencyTable,
}

impl PreparedRope {
    pub fn new(config: RopeConfig) -> Result<Self, RopeError> {
        let freqs = compute_frequencies(&config)?;
        Ok(Self { config, freqs })
    }
}

/// Decoder input: optional visual tokens followed by text token ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prompt {
    pub visual: Option<TokenGrid>,
    pub text: Vec<u32>,
}

impl Prompt {
    pub fn text(tokens: Vec<u32>) -> Self {
        Self {
            visual: None,
            text: tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.visual.as_ref().map_or(0, |g| g.frames() * g.tokens_per_frame()) + self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer quantization settings for a quantized KV cache.
///
/// Per-channel schemes need calibrated parameters (one [`QuantParams`] per
/// layer); per-token schemes derive parameters for each row as it is cached.
#[derive(Debug, Clone, PartialEq)]
pub struct KvQuantizer {
    pub key_scheme: QuantScheme,
    pub value_scheme: QuantScheme,
    pub key_params: Option<Vec<QuantParams>>,
    pub value_params: Option<Vec<QuantParams>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum CacheMode {
    #[default]
    FullPrecision,
    Quantized(KvQuantizer),
}

// One per layer, so the variant size gap does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
enum LayerCache {
    Full {
        keys: Vec<f32>,
        values: Vec<f32>,
    },
    Quantized {
        keys: QuantizedCacheLayer,
        values: QuantizedCacheLayer,
    },
}

/// Per-session key/value storage, `[positions x hidden]` per layer
/// (heads are contiguous `head_dim` slices of each row).
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    hidden: usize,
    len: usize,
}

fn layer_store(
    scheme: &QuantScheme,
    hidden: usize,
    params: Option<&Vec<QuantParams>>,
    layer: usize,
) -> Result<QuantizedCacheLayer, DecoderError> {
    let p = match (scheme.axis(), scheme.group_size()) {
        (QuantAxis::PerChannel, GroupSize::WholeAxis) => Some(params.and_then(|p| p.get(layer)).cloned().ok_or(
            QuantError::GroupMismatch {
                params: 0,
                groups: hidden,
            },
        )?),
        _ => None,
    };
    Ok(QuantizedCacheLayer::with_columns(*scheme, hidden, p)?)
}

impl KvCache {
    pub fn new(spec: &DecoderSpec, mode: &CacheMode) -> Result<Self, DecoderError> {
        let layers = (0..spec.layers)
            .map(|l| match mode {
                CacheMode::FullPrecision => Ok(LayerCache::Full {
                    keys: Vec::new(),
                    values: Vec::new(),
                }),
                CacheMode::Quantized(q) => {
                    for p in [&q.key_params, &q.value_params].into_iter().flatten() {
                        if p.len() != spec.layers {
                            return Err(DecoderError::LayerCount {
                                expected: spec.layers,
                                got: p.len(),
                            });
                        }
                    }
                    Ok(LayerCache::Quantized {
                        keys: layer_store(&q.key_scheme, spec.hidden, q.key_params.as_ref(), l)?,
                        values: layer_store(&q.value_scheme, spec.hidden, q.value_params.as_ref(), l)?,
                    })
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            layers,
            hidden: spec.hidden,
            len: 0,
        })
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self.layers.first(), Some(LayerCache::Quantized { .. }))
    }

    fn push(&mut self, layer: usize, k: &[f32], v: &[f32]) -> Result<(), DecoderError> {
        match &mut self.layers[layer] {
            LayerCache::Full { keys, values } => {
                keys.extend_from_slice(k);
                values.extend_from_slice(v);
            }
            LayerCache::Quantized { keys, values } => {
                keys.push_row(k)?;
                values.push_row(v)?;
            }
        }
        Ok(())
    }

    /// Keys and values of `layer` as seen by attention (dequantized if needed),
    /// covering `rows` positions.
    fn read(&self, layer: usize, rows: usize) -> (Vec<f32>, Vec<f32>) {
        match &self.layers[layer] {
            LayerCache::Full { keys, values } => (
                keys[..rows * self.hidden].to_vec(),
                values[..rows * self.hidden].to_vec(),
            ),
            LayerCache::Quantized { keys, values } => {
                let gather = |q: &QuantizedCacheLayer| (0..rows).flat_map(|r| q.row(r)).collect();
                (gather(keys), gather(values))
            }
        }
    }

    /// Dequantized keys for every cached position of `layer`, `[len x hidden]`.
    pub fn keys(&self, layer: usize) -> Vec<f32> {
        self.read(layer, self.len).0
    }

    pub fn values(&self, layer: usize) -> Vec<f32> {
        self.read(layer, self.len).1
    }
}

/// Attention internals for one layer and one new token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// Concatenated per-head context vectors, before the output projection.
    pub context: Vec<f32>,
    /// Softmax weights per head over all cached positions.
    pub weights: Vec<Vec<f64>>,
    /// Rotated query.
    pub query: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub hidden: Vec<f32>,
    pub logits: Vec<f32>,
    pub position: usize,
    pub rope_position: f64,
    /// Largest `|sum(weights) - 1|` over all layers and heads.
    pub softmax_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub position: usize,
    pub rope_position: f64,
    pub token: u32,
    pub max_logit: f32,
    pub logits_finite: bool,
    pub logit_checksum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    /// One record per forward step (prompt and generated tokens).
    pub steps: Vec<StepRecord>,
}

pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Decoder {
    /// Builds a decoder with deterministic weights derived from `spec.seed`.
    pub fn new(spec: DecoderSpec) -> Result<Self, DecoderError> {
        spec.validate()?;
        let h = spec.hidden;
        let scale = 1.0 / (h as f64).sqrt();
        let mut stream = 0u64;
        let mut next = || {
            stream += 1;
            CounterRng::new(spec.seed, stream)
        };
        let embed_rng = next();
        let embed = (0..(spec.vocab * h) as u64)
            .map(|i| (embed_rng.uniform(i) * scale) as f32)
            .collect();
        let layers = (0..spec.layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; h],
                wq: Linear::random(h, h, next(), scale),
                wk: Linear::random(h, h, next(), scale),
                wv: Linear::random(h, h, next(), scale),
                wo: Linear::random(h, h, next(), scale),
                mlp_norm: vec![1.0; h],
                w_up: Linear::random(4 * h, h, next(), scale),
                w_down: Linear::random(h, 4 * h, next(), scale),
            })
            .collect();
        let lm_head = Linear::random(spec.vocab, h, next(), scale);
        Ok(Self {
            spec,
            embed,
            layers,
            final_norm: vec![1.0; h],
            lm_head,
        })
    }

    pub fn spec(&self) -> &DecoderSpec {
        &self.spec
    }

    /// FNV-1a over every weight's bit pattern.
    pub fn weight_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |xs: &[f32]| {
            for x in xs {
                for b in x.to_bits().to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        feed(&self.embed);
        for l in &self.layers {
            feed(&l.attn_norm);
            for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
                feed(&m.weight);
            }
            feed(&l.mlp_norm);
            feed(&l.w_up.weight);
            feed(&l.w_down.weight);
        }
        feed(&self.final_norm);
        feed(&self.lm_head.weight);
        hash
    }

    pub fn embedding(&self, token: u32) -> Result<&[f32], DecoderError> {
        let t = token as usize;
        if t >= self.spec.vocab {
            return Err(DecoderError::Token {
                token,
                vocab: self.spec.vocab,
            });
        }
        let h = self.spec.hidden;
        Ok(&self.embed[t * h..(t + 1) * h])
    }

    /// Prompt as a sequence of input embeddings, visual tokens first.
    pub fn prompt_embeddings(&self, prompt: &Prompt) -> Result<Vec<Vec<f32>>, DecoderError> {
        let mut out = Vec::with_capacity(prompt.len());
        if let Some(grid) = &prompt.visual {
            if grid.dim() != self.spec.hidden {
                return Err(DecoderError::EmbeddingWidth {
                    expected: self.spec.hidden,
                    got: grid.dim(),
                });
            }
            out.extend(grid.tokens().map(<[f32]>::to_vec));
        }
        for &t in &prompt.text {
            out.push(self.embedding(t)?.to_vec());
        }
        Ok(out)
    }

    fn check_rope(&self, rope: &PreparedRope) -> Result<(), DecoderError> {
        if rope.config.head_dim != self.spec.head_dim() {
            return Err(DecoderError::HeadDim {
                rope: rope.config.head_dim,
                decoder: self.spec.head_dim(),
            });
        }
        Ok(())
    }

    /// Attention sub-block of `layer` for one normalized input.
    ///
    /// Appends the rotated key and the value to `cache` at `cache.len()` and
    /// attends over every cached position, reading back through the cache.
    pub fn attention(
        &self,
        layer: usize,
        x_normed: &[f32],
        cache: &mut KvCache,
        rope: &PreparedRope,
    ) -> Result<AttentionTrace, DecoderError> {
        let w = &self.layers[layer];
        let hd = self.spec.head_dim();
        let position = cache.len();
        let p = interpolate_position(position, &rope.config);

        let mut q = w.wq.forward(x_normed);
        let mut k = w.wk.forward(x_normed);
        let v = w.wv.forward(x_normed);
        for head in 0..self.spec.heads {
            let span = head * hd..(head + 1) * hd;
            rotate_in_place(&mut q[span.clone()], p, &rope.freqs)?;
            rotate_in_place(&mut k[span], p, &rope.freqs)?;
        }
        cache.push(layer, &k, &v)?;

        let rows = position + 1;
        let (keys, values) = cache.read(layer, rows);
        let h = self.spec.hidden;
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut context = vec![0f32; h];
        let mut weights = Vec::with_capacity(self.spec.heads);
        for head in 0..self.spec.heads {
            let off = head * hd;
            let qh = &q[off..off + hd];
            let scores: Vec<f64> = (0..rows)
                .map(|j| dot(qh, &keys[j * h + off..j * h + off + hd]) * inv_sqrt)
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
            for d in 0..hd {
                let acc: f64 = probs
                    .iter()
                    .enumerate()
                    .map(|(j, pj)| pj * values[j * h + off + d] as f64)
                    .sum();
                context[off + d] = acc as f32;
            }
            weights.push(probs);
        }
        Ok(AttentionTrace {
            context,
            weights,
            query: q,
        })
    }

    /// Runs one token through every layer, extending `cache` by one position.
    pub fn attention_step(
        &self,
        embedding: &[f32],
        cache: &mut KvCache,
        rope: &PreparedRope,
    ) -> Result<StepOutput, DecoderError> {
        self.check_rope(rope)?;
        if embedding.len() != self.spec.hidden {
            return Err(DecoderError::EmbeddingWidth {
                expected: self.spec.hidden,
                got: embedding.len(),
            });
        }
        let position = cache.len();
        if position >= rope.config.target_window {
            return Err(DecoderError::ContextOverflow {
                position,
                limit: rope.config.target_window,
            });
        }

        let mut x = embedding.to_vec();
        let mut softmax_error = 0f64;
        for (l, w) in self.layers.iter().enumerate() {
            let trace = self.attention(l, &rms_norm(&x, &w.attn_norm), cache, rope)?;
            for probs in &trace.weights {
                softmax_error = softmax_error.max((probs.iter().sum::<f64>() - 1.0).abs());
            }
            let attn_out = w.wo.forward(&trace.context);
            x.iter_mut().zip(&attn_out).for_each(|(a, b)| *a += b);

            let up: Vec<f32> = w
                .w_up
                .forward(&rms_norm(&x, &w.mlp_norm))
                .into_iter()
                .map(gelu)
                .collect();
            let down = w.w_down.forward(&up);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        cache.len += 1;

        let hidden = rms_norm(&x, &self.final_norm);
        let logits = self.lm_head.forward(&hidden);
        Ok(StepOutput {
            hidden,
            logits,
            position,
            rope_position: interpolate_position(position, &rope.config),
            softmax_error,
        })
    }

    fn record(out: &StepOutput) -> StepRecord {
        let best = argmax(&out.logits);
        StepRecord {
            position: out.position,
            rope_position: out.rope_position,
            token: best as u32,
            max_logit: out.logits[best],
            logits_finite: out.logits.iter().all(|v| v.is_finite()),
            logit_checksum: out.logits.iter().map(|&v| v as f64).sum(),
        }
    }

    /// Greedy decoding of `n_out` tokens after `prompt`.
    pub fn decode(
        &self,
        prompt: &Prompt,
        n_out: usize,
        rope: &RopeConfig,
        mode: &CacheMode,
    ) -> Result<Decoded, DecoderError> {
        if prompt.is_empty() {
            return Err(DecoderError::EmptyPrompt);
        }
        let needed = prompt.len() + n_out;
        if needed > rope.target_window {
            return Err(DecoderError::ContextOverflow {
                position: needed - 1,
                limit: rope.target_window,
            });
        }
        let rope = PreparedRope::new(*rope)?;
        self.check_rope(&rope)?;
        let inputs = self.prompt_embeddings(prompt)?;
        let mut cache = KvCache::new(&self.spec, mode)?;
        let mut decoded = Decoded {
            tokens: Vec::with_capacity(n_out),
            steps: Vec::new(),
        };
        if n_out == 0 {
            return Ok(decoded);
        }

        let mut last = None;
        for emb in &inputs {
            let out = self.attention_step(emb, &mut cache, &rope)?;
            decoded.steps.push(Self::record(&out));
            last = Some(out);
        }
        let mut logits = last.expect("prompt is non-empty").logits;
        loop {
            let token = argmax(&logits) as u32;
            decoded.tokens.push(token);
            if decoded.tokens.len() == n_out {
                break;
            }
            let out = self.attention_step(self.embedding(token)?, &mut cache, &rope)?;
            decoded.steps.push(Self::record(&out));
            logits = out.logits;
        }
        Ok(decoded)
    }

    /// Logits after every input of `prompt` followed by `continuation`
    /// (teacher forcing).
    pub fn forced_logits(
        &self,
        prompt: &Prompt,
        continuation: &[u32],
        rope: &RopeConfig,
        mode: &CacheMode,
    ) -> Result<Vec<Vec<f32>>, DecoderError> {
        let rope = PreparedRope::new(*rope)?;
        let mut inputs = self.prompt_embeddings(prompt)?;
        for &t in continuation {
            inputs.push(self.embedding(t)?.to_vec());
        }
        if inputs.is_empty() {
            return Err(DecoderError::EmptyPrompt);
        }
        let mut cache = KvCache::new(&self.spec, mode)?;
        inputs
            .iter()
            .map(|e| self.attention_step(e, &mut cache, &rope).map(|o| o.logits))
            .collect()
    }

    /// Full-precision pass over `prompt`, returning the filled cache.
    pub fn prefill(&self, prompt: &Prompt, rope: &RopeConfig) -> Result<KvCache, DecoderError> {
        let rope = PreparedRope::new(*rope)?;
        let mut cache = KvCache::new(&self.spec, &CacheMode::FullPrecision)?;
        for e in self.prompt_embeddings(prompt)? {
            self.attention_step(&e, &mut cache, &rope)?;
        }
        Ok(cache)
    }

    /// Calibrates KV quantization on full-precision caches of `samples`.
    ///
    /// Per-channel schemes get per-layer min-max parameters over all sample
    /// positions; per-token schemes need none.
    pub fn calibrate_kv(
        &self,
        samples: &[Prompt],
        rope: &RopeConfig,
        key_scheme: QuantScheme,
        value_scheme: QuantScheme,
    ) -> Result<KvQuantizer, DecoderError> {
        let caches = samples
            .iter()
            .map(|p| self.prefill(p, rope))
            .collect::<Result<Vec<_>, _>>()?;
        let h = self.spec.hidden;
        let per_layer = |scheme: &QuantScheme, take_keys: bool| -> Result<Option<Vec<QuantParams>>, DecoderError> {
            if scheme.axis() == QuantAxis::PerToken {
                return Ok(None);
            }
            (0..self.spec.layers)
                .map(|l| {
                    let tensors = caches
                        .iter()
                        .map(|c| {
                            let data = if take_keys { c.keys(l) } else { c.values(l) };
                            Tensor::new(vec![c.len(), h], data)
                        })
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(QuantError::from)?;
                    Ok(calibrate(&tensors, scheme)?)
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
        };
        Ok(KvQuantizer {
            key_scheme,
            value_scheme,
            key_params: per_layer(&key_scheme, true)?,
            value_params: per_layer(&value_scheme, false)?,
        })
    }
}
