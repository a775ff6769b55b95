use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vidintp_core::rearrange::TokenGrid;
use vidintp_core::tensor_file::{self, TensorFile};
use vidintp_core::Tensor;

fn vidintp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidintp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Grid whose every element in frame `f` (0-based) equals `f`.
fn labelled_grid(frames: usize, tokens: usize, dim: usize) -> TokenGrid {
    let data = (0..frames)
        .flat_map(|f| std::iter::repeat_n(f as f32, tokens * dim))
        .collect();
    TokenGrid::new(frames, tokens, dim, data).unwrap()
}

fn write_f32(dir: &TempDir, name: &str, shape: Vec<usize>, data: Vec<f32>) -> PathBuf {
    let path = dir.path().join(name);
    tensor_file::write_path(&path, &TensorFile::F32(Tensor::new(shape, data).unwrap())).unwrap();
    path
}

#[test]
fn rearrange_four_frames_by_two() {
    let dir = TempDir::new().unwrap();
    let (input, output) = (dir.path().join("in.itpt"), dir.path().join("out.itpt"));
    // Stacked groups: [f1, f3] then [f2, f4], labelled by true frame.
    let data = [0.0f32, 2.0, 1.0, 3.0].iter().flat_map(|&v| [v; 6]).collect();
    tensor_file::write_grid(&input, &TokenGrid::new(4, 3, 2, data).unwrap()).unwrap();
    let o = vidintp(&[
        "rearrange",
        "--input",
        p(&input),
        "--capacity",
        "2",
        "--output",
        p(&output),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(plan["subsequences"], serde_json::json!([[1, 3], [2, 4]]));
    assert_eq!(tensor_file::read_grid(&output).unwrap(), labelled_grid(4, 3, 2));
}

#[test]
fn rearrange_with_full_capacity_copies_input() {
    let dir = TempDir::new().unwrap();
    let (input, output) = (dir.path().join("in.itpt"), dir.path().join("out.itpt"));
    let data = (0..5 * 2 * 3).map(|i| (i as f32).sin()).collect();
    tensor_file::write_grid(&input, &TokenGrid::new(5, 2, 3, data).unwrap()).unwrap();
    let o = vidintp(&[
        "rearrange",
        "--input",
        p(&input),
        "--capacity",
        "5",
        "--output",
        p(&output),
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&output).unwrap());
}

#[test]
fn rearrange_rejects_indivisible_frames() {
    let dir = TempDir::new().unwrap();
    let (input, output) = (dir.path().join("in.itpt"), dir.path().join("out.itpt"));
    tensor_file::write_grid(&input, &labelled_grid(10, 1, 1)).unwrap();
    let o = vidintp(&[
        "rearrange",
        "--input",
        p(&input),
        "--capacity",
        "4",
        "--output",
        p(&output),
    ]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("divisible"), "{}", stderr(&o));
    assert!(!output.exists());
}

#[test]
fn missing_and_corrupt_inputs_have_distinct_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out.itpt");
    let missing = dir.path().join("nope.itpt");
    let o = vidintp(&[
        "rearrange",
        "--input",
        p(&missing),
        "--capacity",
        "1",
        "--output",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));

    let junk = dir.path().join("junk.itpt");
    std::fs::write(&junk, b"NOPE\x01\x00").unwrap();
    let o = vidintp(&["rearrange", "--input", p(&junk), "--capacity", "1", "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(4));

    let o = vidintp(&["rearrange", "--capacity", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_default_has_nine_rows() {
    let o = vidintp(&["analyze", "--format", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows[0].starts_with("8,16,FP16"));
    assert!(!rows.iter().any(|r| r.starts_with("8,2,")));

    let all = vidintp(&["analyze", "--format", "csv", "--all-rows"]);
    assert_eq!(stdout(&all).lines().count(), 11);
}

#[test]
fn analyze_single_row_kv() {
    let o = vidintp(&["analyze", "--frames", "8", "--bits", "16", "--format", "json"]);
    assert!(o.status.success());
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    let kv_gb = rows[0]["kv_bytes"].as_f64().unwrap() / 1e9;
    assert!((kv_gb - 1.1).abs() <= 0.11, "{kv_gb}");
}

#[test]
fn analyze_rejects_unknown_profile_key() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("model.json");
    std::fs::write(
        &path,
        r#"{"n_params": 7e9, "layers": 32, "hidden": 4096, "weight_bytes_per_param": 2,
            "tokens_per_frame": 256, "activation_overhead_bytes": 0, "flux_capacitor": 1}"#,
    )
    .unwrap();
    let o = vidintp(&["analyze", "--model", p(&path)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("flux_capacitor"), "{}", stderr(&o));
}

#[test]
fn analyze_rejects_empty_frames() {
    let o = vidintp(&["analyze", "--frames", ""]);
    assert!(!o.status.success());
}

fn quantize_json(args: &[&str]) -> serde_json::Value {
    let o = vidintp(args);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn sixteen_bit_error_is_within_half_step() {
    let dir = TempDir::new().unwrap();
    let data: Vec<f32> = (0..400).map(|i| ((i * 37 % 101) as f32 - 50.0) * 0.173).collect();
    let (lo, hi) = data
        .iter()
        .fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let input = write_f32(&dir, "x.itpt", vec![400, 1], data);
    let out = dir.path().join("q.itpt");
    let r = quantize_json(&["quantize", "--input", p(&input), "--bits", "16", "--output", p(&out)]);
    let bound = (hi - lo) as f64 / 65535.0 / 2.0 + hi.abs().max(lo.abs()) as f64 * f32::EPSILON as f64;
    assert!(r["max_abs_error"].as_f64().unwrap() <= bound, "{r}");
}

#[test]
fn two_bit_lattice_values_are_exact() {
    let dir = TempDir::new().unwrap();
    let input = write_f32(
        &dir,
        "x.itpt",
        vec![8, 1],
        vec![-1.0, -0.5, 0.0, 0.5, 0.5, 0.0, -0.5, -1.0],
    );
    let out = dir.path().join("q.itpt");
    let r = quantize_json(&["quantize", "--input", p(&input), "--bits", "2", "--output", p(&out)]);
    assert_eq!(r["max_abs_error"].as_f64().unwrap(), 0.0);
}

#[test]
fn self_verify_and_dequantize_round_trip() {
    let dir = TempDir::new().unwrap();
    let data: Vec<f32> = (0..6 * 8).map(|i| (i as f32 * 0.7).cos() * 3.0).collect();
    let input = write_f32(&dir, "x.itpt", vec![6, 8], data);
    let calib = write_f32(
        &dir,
        "c.itpt",
        vec![2, 8],
        vec![-4.0; 8].into_iter().chain(vec![4.0; 8]).collect(),
    );
    let q = dir.path().join("q.itpt");
    let r = quantize_json(&[
        "quantize",
        "--input",
        p(&input),
        "--bits",
        "4",
        "--axis",
        "token",
        "--group-size",
        "4",
        "--output",
        p(&q),
        "--self-verify",
    ]);
    assert_eq!(r["idempotent"], serde_json::json!(true));
    assert_eq!(r["groups"], serde_json::json!(12));

    let r = quantize_json(&[
        "quantize",
        "--input",
        p(&input),
        "--bits",
        "4",
        "--calibration",
        p(&calib),
        "--output",
        p(&q),
    ]);
    assert_eq!(r["groups"], serde_json::json!(8));

    // Re-quantizing the dequantized file with the same calibration gives the same bytes.
    let back = dir.path().join("back.itpt");
    let o = vidintp(&["dequantize", "--input", p(&q), "--output", p(&back)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let q2 = dir.path().join("q2.itpt");
    quantize_json(&[
        "quantize",
        "--input",
        p(&back),
        "--bits",
        "4",
        "--calibration",
        p(&calib),
        "--output",
        p(&q2),
    ]);
    assert_eq!(std::fs::read(&q).unwrap(), std::fs::read(&q2).unwrap());
    assert!(tensor_file::read_path(&back).unwrap().into_f32().is_ok());
}

#[test]
fn quantize_rejects_non_finite_input() {
    let dir = TempDir::new().unwrap();
    let input = write_f32(&dir, "x.itpt", vec![2, 1], vec![1.0, f32::NAN]);
    let o = vidintp(&[
        "quantize",
        "--input",
        p(&input),
        "--bits",
        "8",
        "--output",
        p(&dir.path().join("q")),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn demo_decode_is_deterministic() {
    let args = [
        "demo-decode",
        "--prompt",
        "3,1,4,1,5",
        "--n-out",
        "12",
        "--kv-bits",
        "4",
    ];
    let a = vidintp(&args);
    let b = vidintp(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["tokens"].as_array().unwrap().len(), 12);
    // One record per forward step (the last token is never fed back) plus the summary.
    assert_eq!(text.lines().count(), 5 + 11 + 1);
}

#[test]
fn demo_decode_linear_at_equal_windows_matches_none() {
    let common = [
        "demo-decode",
        "--prompt",
        "9,8,7",
        "--n-out",
        "10",
        "--pretrained-window",
        "64",
        "--target-window",
        "64",
    ];
    let none = vidintp(&[&common[..], &["--mode", "none"]].concat());
    let linear = vidintp(&[&common[..], &["--mode", "linear"]].concat());
    assert!(none.status.success());
    assert_eq!(none.stdout, linear.stdout);
}

#[test]
fn demo_decode_reports_window_overflow() {
    let o = vidintp(&[
        "demo-decode",
        "--prompt",
        "1,2,3",
        "--n-out",
        "100",
        "--target-window",
        "64",
    ]);
    assert_eq!(o.status.code(), Some(5));
    let err = stderr(&o);
    assert!(err.contains("64") && err.contains("102"), "{err}");
}

#[test]
fn demo_decode_accepts_visual_grid() {
    let dir = TempDir::new().unwrap();
    let grid = dir.path().join("grid.itpt");
    let data = (0..2 * 4 * 64).map(|i| ((i % 13) as f32 - 6.0) * 0.05).collect();
    tensor_file::write_grid(&grid, &TokenGrid::new(2, 4, 64, data).unwrap()).unwrap();
    let o = vidintp(&["demo-decode", "--grid", p(&grid), "--prompt", "5", "--n-out", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 8 + 1 + 3 + 1);

    let o = vidintp(&[
        "demo-decode",
        "--grid",
        p(&grid),
        "--prompt",
        "5",
        "--hidden",
        "32",
        "--heads",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(5));
}
