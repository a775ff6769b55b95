//! `vidintp` command-line tool.
//!
//! Exit status: 0 success, 1 internal failure (including a failed
//! self-verification), 2 usage error, 3 I/O error, 4 malformed input file or
//! profile, 5 violated precondition (divisibility, context window, invalid
//! parameters).

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vidintp_core::decoder::{CacheMode, Decoder, DecoderError, DecoderSpec, Prompt};
use vidintp_core::quant::{
    calibrate, dequantize, error_stats, quantize, GroupSize, QuantAxis, QuantError, QuantScheme,
};
use vidintp_core::rearrange::{interleave_tokens, plan_subsequences, RearrangeError, TokenGrid};
use vidintp_core::roofline::{self, HardwareSpec, ModelSpec, ProfileError};
use vidintp_core::rope::{RopeConfig, RopeError, ScalingMode, DEFAULT_BASE};
use vidintp_core::tensor_file::{self, FormatError, TensorFile};
use vidintp_core::Tensor;

const EXIT_INTERNAL: u8 = 1;
const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_PRECONDITION: u8 = 5;

/// Seed used when `--seed` is not given.
const DEFAULT_SEED: u64 = 0;

#[derive(Parser)]
#[command(
    name = "vidintp",
    version,
    about = "Frame rearrangement, RoPE window scaling, KV-cache quantization and decode cost analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interleave group-major encoder outputs back into frame order.
    Rearrange(RearrangeArgs),
    /// Memory, OPs and decode-time estimates over frame counts and KV bit widths.
    Analyze(AnalyzeArgs),
    /// Quantize an f32 tensor file into a packed code file.
    Quantize(QuantizeArgs),
    /// Expand a packed code file back to f32.
    Dequantize(DequantizeArgs),
    /// Greedy decoding with the toy decoder; one JSON record per step.
    DemoDecode(DemoArgs),
}

#[derive(clap::Args)]
struct RearrangeArgs {
    /// Token grid [frames, tokens, dim] holding the encoder outputs of each
    /// subsequence stacked one after another.
    #[arg(long)]
    input: PathBuf,
    /// Frames per encoder pass.
    #[arg(long)]
    capacity: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Table,
    Json,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    /// Model profile JSON (bundled 7B profile when omitted).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Hardware profile JSON (bundled A100 profile when omitted).
    #[arg(long)]
    hw: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
    frames: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "16,2")]
    bits: Vec<u32>,
    /// Generated tokens per request.
    #[arg(long, default_value_t = roofline::DEFAULT_N_OUT)]
    n_out: u64,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
    /// Frame count reported at 16 bits only. Defaults to the smallest
    /// `--frames` value.
    #[arg(long, conflicts_with = "all_rows")]
    baseline_frames: Option<u64>,
    /// Emit every frames x bits combination.
    #[arg(long)]
    all_rows: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Channel,
    Token,
}

#[derive(clap::Args)]
struct QuantizeArgs {
    /// f32 tensor file; the last dimension is the channel axis.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=16))]
    bits: u8,
    #[arg(long, value_enum, default_value = "channel")]
    axis: Axis,
    /// Elements per group along the grouped axis (whole axis when omitted).
    #[arg(long)]
    group_size: Option<usize>,
    /// Calibration tensors (repeatable). The input itself when omitted.
    #[arg(long)]
    calibration: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Dequantize, re-quantize and check the codes are unchanged.
    #[arg(long)]
    self_verify: bool,
}

#[derive(clap::Args)]
struct DequantizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    None,
    Linear,
    Ntk,
}

impl From<Mode> for ScalingMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::None => ScalingMode::None,
            Mode::Linear => ScalingMode::LinearInterpolation,
            Mode::Ntk => ScalingMode::NtkAware,
        }
    }
}

#[derive(clap::Args)]
struct DemoArgs {
    /// Visual token grid placed ahead of the text prompt; its dim must equal --hidden.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Comma-separated prompt token ids.
    #[arg(long, value_delimiter = ',', required = true)]
    prompt: Vec<u32>,
    #[arg(long, default_value_t = 16)]
    n_out: usize,
    #[arg(long, value_enum, default_value = "ntk")]
    mode: Mode,
    #[arg(long, default_value_t = DEFAULT_BASE)]
    base: f64,
    #[arg(long, default_value_t = 64)]
    pretrained_window: usize,
    #[arg(long, default_value_t = 256)]
    target_window: usize,
    /// Quantize the KV cache to this many bits (full precision when omitted).
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=16))]
    kv_bits: Option<u8>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    vocab: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Rearrange(a) => rearrange(a),
        Command::Analyze(a) => analyze(a),
        Command::Quantize(a) => quantize_cmd(a),
        Command::Dequantize(a) => dequantize_cmd(a),
        Command::DemoDecode(a) => demo_decode(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FormatError>() {
            return match e {
                FormatError::Io { .. } => EXIT_IO,
                FormatError::Grid(_) => EXIT_PRECONDITION,
                _ => EXIT_FORMAT,
            };
        }
        if cause.is::<io::Error>() {
            return EXIT_IO;
        }
        if let Some(e) = cause.downcast_ref::<ProfileError>() {
            return match e {
                ProfileError::Parse(_) => EXIT_FORMAT,
                _ => EXIT_PRECONDITION,
            };
        }
        if let Some(e) = cause.downcast_ref::<QuantError>() {
            return match e {
                QuantError::NonFinite { .. } => EXIT_FORMAT,
                _ => EXIT_PRECONDITION,
            };
        }
        if cause.is::<RearrangeError>() || cause.is::<DecoderError>() || cause.is::<RopeError>() {
            return EXIT_PRECONDITION;
        }
    }
    EXIT_INTERNAL
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn rearrange(a: RearrangeArgs) -> anyhow::Result<()> {
    let stacked = tensor_file::read_grid(&a.input)?;
    let plan = plan_subsequences(stacked.frames(), a.capacity)?;
    let groups = stacked.chunk_frames(a.capacity)?;
    let merged = interleave_tokens(&groups, &plan)?;
    tensor_file::write_grid(&a.output, &merged)?;
    print_json(&plan)
}

fn read_profile(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let model = match &a.model {
        Some(p) => ModelSpec::from_json(&read_profile(p)?).with_context(|| format!("model profile {}", p.display()))?,
        None => ModelSpec::vicuna_7b(),
    };
    let hw = match &a.hw {
        Some(p) => {
            HardwareSpec::from_json(&read_profile(p)?).with_context(|| format!("hardware profile {}", p.display()))?
        }
        None => HardwareSpec::a100(),
    };
    let mut rows = roofline::analyze(&model, &hw, &a.frames, &a.bits, a.n_out)?;
    if !a.all_rows {
        let baseline = a.baseline_frames.or_else(|| a.frames.iter().copied().min());
        rows.retain(|r| Some(r.frames) != baseline || r.kv_bits == 16 || !a.bits.contains(&16));
    }
    match a.format {
        ReportFormat::Csv => print!("{}", roofline::to_csv(&rows)),
        ReportFormat::Table => print!("{}", roofline::to_table(&rows)),
        ReportFormat::Json => print_json(&rows)?,
    }
    Ok(())
}

fn read_f32(path: &Path) -> anyhow::Result<Tensor> {
    tensor_file::read_path(path)?
        .into_f32()
        .with_context(|| path.display().to_string())
}

#[derive(Serialize)]
struct QuantizeReport {
    bits: u8,
    axis: &'static str,
    groups: usize,
    elements: usize,
    max_abs_error: f64,
    mean_abs_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    idempotent: Option<bool>,
}

fn quantize_cmd(a: QuantizeArgs) -> anyhow::Result<()> {
    let (axis, axis_name) = match a.axis {
        Axis::Channel => (QuantAxis::PerChannel, "per_channel"),
        Axis::Token => (QuantAxis::PerToken, "per_token"),
    };
    let group = a.group_size.map_or(GroupSize::WholeAxis, GroupSize::Fixed);
    let scheme = QuantScheme::new(a.bits, axis, group)?;
    let input = read_f32(&a.input)?;
    let samples = if a.calibration.is_empty() {
        vec![input.clone()]
    } else {
        a.calibration
            .iter()
            .map(|p| read_f32(p))
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    let params = calibrate(&samples, &scheme)?;
    let layer = quantize(&input, &params, &scheme)?;
    let back = dequantize(&layer)?;
    let stats = error_stats(&input, &back);

    let idempotent = if a.self_verify {
        let again = quantize(&back, &params, &scheme)?;
        Some(
            tensor_file::encode(&TensorFile::Packed(again))?
                == tensor_file::encode(&TensorFile::Packed(layer.clone()))?,
        )
    } else {
        None
    };
    let bytes = tensor_file::encode(&TensorFile::Packed(layer))?;
    fs::write(&a.output, &bytes).map_err(|source| FormatError::Io {
        path: a.output.display().to_string(),
        source,
    })?;
    print_json(&QuantizeReport {
        bits: a.bits,
        axis: axis_name,
        groups: params.len(),
        elements: input.len(),
        max_abs_error: stats.max_abs,
        mean_abs_error: stats.mean_abs,
        idempotent,
    })?;
    if idempotent == Some(false) {
        return Err(anyhow!("self-verification failed: re-quantized codes differ"));
    }
    Ok(())
}

fn dequantize_cmd(a: DequantizeArgs) -> anyhow::Result<()> {
    let layer = tensor_file::read_path(&a.input)?
        .into_packed()
        .with_context(|| a.input.display().to_string())?;
    let t = dequantize(&layer)?;
    tensor_file::write_path(&a.output, &TensorFile::F32(t))?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    tokens: &'a [u32],
}

fn demo_decode(a: DemoArgs) -> anyhow::Result<()> {
    let spec = DecoderSpec {
        layers: a.layers,
        hidden: a.hidden,
        heads: a.heads,
        vocab: a.vocab,
        seed: a.seed,
    };
    spec.validate()?;
    let rope = RopeConfig::new(
        a.base,
        spec.head_dim(),
        a.pretrained_window,
        a.target_window,
        a.mode.into(),
    )?;
    let visual: Option<TokenGrid> = a.grid.as_deref().map(tensor_file::read_grid).transpose()?;
    let prompt = Prompt { visual, text: a.prompt };
    let decoder = Decoder::new(spec)?;
    let mode = match a.kv_bits {
        None => CacheMode::FullPrecision,
        Some(bits) => {
            // Key channels are calibrated on the prompt itself.
            let q = decoder.calibrate_kv(
                std::slice::from_ref(&prompt),
                &rope,
                QuantScheme::keys(bits)?,
                QuantScheme::values(bits)?,
            )?;
            CacheMode::Quantized(q)
        }
    };
    let decoded = decoder.decode(&prompt, a.n_out, &rope, &mode)?;
    let distinct: BTreeSet<u32> = decoded.tokens.iter().copied().collect();
    eprintln!(
        "decoded {} tokens ({} distinct), weight checksum {:016x}",
        decoded.tokens.len(),
        distinct.len(),
        decoder.weight_checksum()
    );
    let mut out = io::stdout().lock();
    for step in &decoded.steps {
        serde_json::to_writer(&mut out, step)?;
        writeln!(out)?;
    }
    serde_json::to_writer(
        &mut out,
        &Summary {
            tokens: &decoded.tokens,
        },
    )?;
    writeln!(out)?;
    Ok(())
}
