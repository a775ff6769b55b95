#![allow(dead_code)]
//! Reference implementations shared by the integration suites.

pub mod decoder_oracle;

/// Elementwise reference: `S * (clamp(round(x / S) - Z, p_min, p_max) + Z)`,
/// with ties to even, written out directly in f64.
pub fn eq7(x: f32, s: f32, z: i32, bits: u8) -> f32 {
    let p_min = -(1i64 << (bits - 1)) as f64;
    let p_max = ((1i64 << (bits - 1)) - 1) as f64;
    let y = x as f64 / s as f64;
    let mut r = y.floor();
    let frac = y - r;
    if frac > 0.5 || (frac == 0.5 && r % 2.0 != 0.0) {
        r += 1.0;
    }
    let c = (r - z as f64).max(p_min).min(p_max);
    (s as f64 * (c + z as f64)) as f32
}
