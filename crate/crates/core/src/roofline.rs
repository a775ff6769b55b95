//! Roofline cost model for batch-1 decoding of a video LLM backbone.
//!
//! Decoding one token streams every weight plus the whole KV cache from
//! memory, so per-token latency is `total_memory / effective_bandwidth`.
//! Operation counts cover `n_out` generated tokens: `2 * n_params` weight
//! FLOPs per token plus `4 * layers * hidden * context` attention FLOPs
//! (scores and weighted values) against the mean context length.
//!
//! Sizes are decimal (1 GB = 1e9 bytes, 1 T = 1e12 operations).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bundled Vicuna-7B profile (decoder linear-layer weights, FP16).
pub const VICUNA_7B_JSON: &str = include_str!("../profiles/vicuna-7b.json");
/// Bundled A100 profile with the calibrated effective bandwidth.
pub const A100_JSON: &str = include_str!("../profiles/a100.json");

/// Default number of generated tokens the OPs column is computed for.
pub const DEFAULT_N_OUT: u64 = 1000;

pub const GB: f64 = 1e9;
pub const TERA: f64 = 1e12;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("invalid profile: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("profile field `{field}` must be {requirement}, got {value}")]
    Field {
        field: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("{0} list must not be empty")]
    EmptyList(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_params: f64,
    pub layers: u64,
    pub hidden: u64,
    pub weight_bytes_per_param: f64,
    pub tokens_per_frame: u64,
    pub activation_overhead_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    /// Operations per second.
    pub peak_compute: f64,
    /// Bytes per second.
    pub peak_bandwidth: f64,
    pub bandwidth_efficiency: f64,
}

fn positive(field: &'static str, value: f64) -> Result<(), ProfileError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ProfileError::Field {
            field,
            requirement: "finite and > 0",
            value,
        })
    }
}

impl ModelSpec {
    pub fn vicuna_7b() -> Self {
        Self::from_json(VICUNA_7B_JSON).expect("bundled profile is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        positive("n_params", self.n_params)?;
        positive("layers", self.layers as f64)?;
        positive("hidden", self.hidden as f64)?;
        positive("weight_bytes_per_param", self.weight_bytes_per_param)?;
        if !(self.activation_overhead_bytes.is_finite() && self.activation_overhead_bytes >= 0.0) {
            return Err(ProfileError::Field {
                field: "activation_overhead_bytes",
                requirement: "finite and >= 0",
                value: self.activation_overhead_bytes,
            });
        }
        Ok(())
    }

    pub fn weight_bytes(&self) -> f64 {
        self.n_params * self.weight_bytes_per_param
    }

    /// Context length contributed by `frames` video frames.
    pub fn seq_len(&self, frames: u64) -> u64 {
        frames * self.tokens_per_frame
    }
}

impl HardwareSpec {
    pub fn a100() -> Self {
        Self::from_json(A100_JSON).expect("bundled profile is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        positive("peak_compute", self.peak_compute)?;
        positive("peak_bandwidth", self.peak_bandwidth)?;
        if !(self.bandwidth_efficiency > 0.0 && self.bandwidth_efficiency <= 1.0) {
            return Err(ProfileError::Field {
                field: "bandwidth_efficiency",
                requirement: "in (0, 1]",
                value: self.bandwidth_efficiency,
            });
        }
        Ok(())
    }

    /// Sustained bytes per second.
    pub fn effective_bandwidth(&self) -> f64 {
        self.peak_bandwidth * self.bandwidth_efficiency
    }
}

/// One row of the cost table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub frames: u64,
    pub kv_bits: u32,
    pub ops_total: f64,
    pub decode_time_ms: f64,
    /// Per-token compute-bound time, for comparison against the memory bound.
    pub compute_time_ms: f64,
    pub total_memory_bytes: f64,
    pub kv_bytes: f64,
}

/// K and V storage for `seq_len` tokens at `bits` per element, batch 1.
pub fn kv_bytes(model: &ModelSpec, seq_len: u64, bits: u32) -> f64 {
    2.0 * model.layers as f64 * model.hidden as f64 * seq_len as f64 * bits as f64 / 8.0
}

/// Operations to generate `n_out` tokens after a `seq_len`-token context.
pub fn decode_ops(model: &ModelSpec, seq_len: u64, n_out: u64) -> f64 {
    if n_out == 0 {
        return 0.0;
    }
    // Mean of seq_len, seq_len + 1, ..., seq_len + n_out - 1.
    let mean_context = seq_len as f64 + (n_out - 1) as f64 / 2.0;
    let per_token = 2.0 * model.n_params + 4.0 * model.layers as f64 * model.hidden as f64 * mean_context;
    n_out as f64 * per_token
}

pub fn total_memory(model: &ModelSpec, seq_len: u64, bits: u32) -> f64 {
    model.weight_bytes() + model.activation_overhead_bytes + kv_bytes(model, seq_len, bits)
}

/// Memory-bound per-token latency in milliseconds.
pub fn decode_time(total_memory_bytes: f64, hw: &HardwareSpec) -> f64 {
    total_memory_bytes / hw.effective_bandwidth() * 1e3
}

pub fn report(model: &ModelSpec, hw: &HardwareSpec, frames: u64, bits: u32, n_out: u64) -> CostReport {
    let seq = model.seq_len(frames);
    let total = total_memory(model, seq, bits);
    let ops = decode_ops(model, seq, n_out);
    let per_token_ops = if n_out == 0 { 0.0 } else { ops / n_out as f64 };
    CostReport {
        frames,
        kv_bits: bits,
        ops_total: ops,
        decode_time_ms: decode_time(total, hw),
        compute_time_ms: per_token_ops / hw.peak_compute * 1e3,
        total_memory_bytes: total,
        kv_bytes: kv_bytes(model, seq, bits),
    }
}

/// Cost table over `frame_counts x bit_widths`, frame-major.
pub fn analyze(
    model: &ModelSpec,
    hw: &HardwareSpec,
    frame_counts: &[u64],
    bit_widths: &[u32],
    n_out: u64,
) -> Result<Vec<CostReport>, ProfileError> {
    if frame_counts.is_empty() {
        return Err(ProfileError::EmptyList("frame"));
    }
    if bit_widths.is_empty() {
        return Err(ProfileError::EmptyList("bit width"));
    }
    model.validate()?;
    hw.validate()?;
    Ok(frame_counts
        .iter()
        .flat_map(|&f| bit_widths.iter().map(move |&b| (f, b)))
        .map(|(f, b)| report(model, hw, f, b, n_out))
        .collect())
}

fn label(bits: u32) -> String {
    match bits {
        16 => "FP16".to_string(),
        32 => "FP32".to_string(),
        b => format!("INT{b}"),
    }
}

pub fn to_csv(rows: &[CostReport]) -> String {
    let mut out = String::from("frames,kv_bits,quantization,ops_t,decode_time_ms,total_memory_gb,kv_gb\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.3},{:.3}\n",
            r.frames,
            r.kv_bits,
            label(r.kv_bits),
            r.ops_total / TERA,
            r.decode_time_ms,
            r.total_memory_bytes / GB,
            r.kv_bytes / GB
        ));
    }
    out
}

pub fn to_table(rows: &[CostReport]) -> String {
    let mut out = format!(
        "{:>6}  {:>6}  {:>8}  {:>15}  {:>14}  {:>10}\n",
        "Frames", "Quant", "OPs (T)", "Decode (ms)", "Total (GB)", "KV (GB)"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>6}  {:>6}  {:>8.1}  {:>15.1}  {:>14.1}  {:>10.1}\n",
            r.frames,
            label(r.kv_bits),
            r.ops_total / TERA,
            r.decode_time_ms,
            r.total_memory_bytes / GB,
            r.kv_bytes / GB
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vicuna_shape() -> ModelSpec {
        ModelSpec {
            n_params: 6.74e9,
            layers: 32,
            hidden: 4096,
            weight_bytes_per_param: 2.0,
            tokens_per_frame: 256,
            activation_overhead_bytes: 0.0,
        }
    }

    #[test]
    fn kv_bytes_for_eight_frames() {
        let m = vicuna_shape();
        assert_eq!(kv_bytes(&m, 2048, 16), 1_073_741_824.0);
        assert_eq!(kv_bytes(&m, 16384, 16), 8_589_934_592.0);
        assert_eq!(kv_bytes(&m, 16384, 2), 1_073_741_824.0);
    }

    #[test]
    fn ops_examples() {
        let m = vicuna_shape();
        assert_eq!(decode_ops(&m, 2048, 0), 0.0);
        let ops = decode_ops(&m, 2048, 1000);
        assert!((ops / 14.2e12 - 1.0).abs() < 0.05);
        let delta = decode_ops(&m, 4096, 1000) - ops;
        assert!((delta - 4.0 * 32.0 * 4096.0 * 2048.0 * 1000.0).abs() < 1.0);
    }

    #[test]
    fn decode_time_examples() {
        let hw = HardwareSpec {
            peak_compute: 312e12,
            peak_bandwidth: 1.502e12,
            bandwidth_efficiency: 0.5,
        };
        assert!((decode_time(14.0e9, &hw) - 18.64).abs() < 0.01);
        assert!((decode_time(30.1e9, &hw) / 39.9 - 1.0).abs() < 0.01);
    }

    #[test]
    fn zero_tokens_per_frame_leaves_weights_only() {
        let m = ModelSpec {
            tokens_per_frame: 0,
            ..ModelSpec::vicuna_7b()
        };
        let rows = analyze(&m, &HardwareSpec::a100(), &[8], &[16], 1000).unwrap();
        assert_eq!(rows[0].kv_bytes, 0.0);
        assert_eq!(
            rows[0].total_memory_bytes,
            m.weight_bytes() + m.activation_overhead_bytes
        );
    }

    #[test]
    fn profile_validation() {
        let err = ModelSpec::from_json(
            r#"{"n_params":1,"layers":1,"hidden":1,"weight_bytes_per_param":2,
                "tokens_per_frame":1,"activation_overhead_bytes":0,"heads":4}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("heads"), "{err}");
        let err =
            HardwareSpec::from_json(r#"{"peak_compute":1,"peak_bandwidth":1,"bandwidth_efficiency":1.5}"#).unwrap_err();
        assert!(err.to_string().contains("bandwidth_efficiency"));
        assert!(analyze(&ModelSpec::vicuna_7b(), &HardwareSpec::a100(), &[], &[16], 1).is_err());
    }

    #[test]
    fn rows_are_frame_major() {
        let rows = analyze(&ModelSpec::vicuna_7b(), &HardwareSpec::a100(), &[16, 32], &[16, 2], 10).unwrap();
        let keys: Vec<(u64, u32)> = rows.iter().map(|r| (r.frames, r.kv_bits)).collect();
        assert_eq!(keys, vec![(16, 16), (16, 2), (32, 16), (32, 2)]);
        assert!(to_csv(&rows).lines().count() == 5);
        assert!(to_table(&rows).contains("INT2"));
    }
}
