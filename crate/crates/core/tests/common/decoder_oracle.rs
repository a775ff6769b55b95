//! Cache-free f64 forward pass over a whole sequence with a causal mask.
//! Shares only the weights with the implementation under test.
use vidintp_core::decoder::Decoder;
use vidintp_core::rope::{RopeConfig, ScalingMode};

fn matvec(w: &[f32], in_dim: usize, x: &[f64]) -> Vec<f64> {
    w.chunks_exact(in_dim)
        .map(|row| row.iter().zip(x).map(|(a, b)| *a as f64 * b).sum())
        .collect()
}

fn norm(x: &[f64], g: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * *g as f64).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn rotate(v: &mut [f64], pos: f64, cfg: &RopeConfig) {
    let d = cfg.head_dim as f64;
    let base = match cfg.mode {
        ScalingMode::NtkAware => {
            cfg.base * (cfg.target_window as f64 / cfg.pretrained_window as f64).powf(d / (d - 2.0))
        }
        _ => cfg.base,
    };
    for (i, pair) in v.chunks_exact_mut(2).enumerate() {
        let theta = base.powf(-2.0 * i as f64 / d);
        let (s, c) = (pos * theta).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
}

pub fn logits(dec: &Decoder, inputs: &[Vec<f32>], cfg: &RopeConfig) -> Vec<Vec<f64>> {
    let spec = dec.spec();
    let (h, hd) = (spec.hidden, spec.head_dim());
    let t = inputs.len();
    let mut xs: Vec<Vec<f64>> = inputs.iter().map(|e| e.iter().map(|&v| v as f64).collect()).collect();
    for w in &dec.layers {
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| norm(x, &w.attn_norm)).collect();
        let mut q: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&w.wq.weight, h, x)).collect();
        let mut k: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&w.wk.weight, h, x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| matvec(&w.wv.weight, h, x)).collect();
        for i in 0..t {
            let pos = match cfg.mode {
                ScalingMode::LinearInterpolation => i as f64 * cfg.pretrained_window as f64 / cfg.target_window as f64,
                _ => i as f64,
            };
            for head in 0..spec.heads {
                rotate(&mut q[i][head * hd..(head + 1) * hd], pos, cfg);
                rotate(&mut k[i][head * hd..(head + 1) * hd], pos, cfg);
            }
        }
        for i in 0..t {
            let mut ctx = vec![0.0; h];
            for head in 0..spec.heads {
                let r = head * hd..(head + 1) * hd;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for d in r.clone() {
                        ctx[d] += ej / z * v[j][d];
                    }
                }
            }
            let o = matvec(&w.wo.weight, h, &ctx);
            xs[i].iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let up: Vec<f64> = matvec(&w.w_up.weight, h, &norm(&xs[i], &w.mlp_norm))
                .into_iter()
                .map(gelu)
                .collect();
            let down = matvec(&w.w_down.weight, 4 * h, &up);
            xs[i].iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
    }
    xs.iter()
        .map(|x| matvec(&dec.lm_head.weight, h, &norm(x, &dec.final_norm)))
        .collect()
}
