//! Independent reference implementations used as test oracles. Nothing
//! here calls into the pooled pipeline.
#![allow(dead_code)]

use fastscan_core::block::{BlockParams, DirectionParams};
use fastscan_core::linalg::Matrix;
use fastscan_core::selective_scan::ScanLane;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_lane(rng: &mut impl Rng, len: usize, state: usize) -> ScanLane<f64> {
    ScanLane {
        len,
        state,
        abar: uniform_vec(rng, len * state, 0.05, 0.999),
        bx: uniform_vec(rng, len * state, -1.0, 1.0),
        c: uniform_vec(rng, len * state, -1.0, 1.0),
        x_raw: uniform_vec(rng, len, -1.0, 1.0),
        d_skip: rng.random_range(-1.0..1.0),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Naive `x (m x k) @ w (k x n)`.
pub fn naive_matmul(x: &[f64], m: usize, w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m * w.cols];
    for i in 0..m {
        for j in 0..w.cols {
            let mut acc = 0.0;
            for k in 0..w.rows {
                acc += x[i * w.rows + k] * w.data[k * w.cols + j];
            }
            out[i * w.cols + j] = acc;
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Direct convolution sum with explicit zero padding.
pub fn naive_conv(seq: &[f64], steps: usize, ch: usize, taps: &Matrix, bias: &[f64]) -> Vec<f64> {
    let k = taps.cols;
    let mut out = vec![0.0; steps * ch];
    for t in 0..steps {
        for c in 0..ch {
            let mut acc = bias[c];
            for i in 0..k {
                let src = t as isize - (k as isize - 1) + i as isize;
                let v = if src < 0 { 0.0 } else { seq[src as usize * ch + c] };
                acc += taps.data[c * k + i] * v;
            }
            out[t * ch + c] = acc;
        }
    }
    out
}

fn zoh_exact(delta: f64, a: f64, b: f64) -> (f64, f64) {
    let abar = (delta * a).exp();
    let bbar = if (delta * a).abs() < 1e-8 {
        delta * b
    } else {
        (abar - 1.0) / (delta * a) * delta * b
    };
    (abar, bbar)
}

/// Unpooled Vim branch on one sequence (`steps x ch`), forward direction.
fn reference_direction(seq: &[f64], steps: usize, p: &DirectionParams, post_norm: bool) -> Vec<f64> {
    let ch = p.conv_taps.rows;
    let n = p.ssm.a_log.cols;
    let conv = naive_conv(seq, steps, ch, &p.conv_taps, &p.conv_bias);
    let act: Vec<f64> = conv.iter().map(|&v| silu(v)).collect();
    let bmat = naive_matmul(&act, steps, &p.ssm.w_b);
    let cmat = naive_matmul(&act, steps, &p.ssm.w_c);
    let dt = naive_matmul(&act, steps, &p.ssm.w_dt);
    let mut out = vec![0.0; steps * ch];
    for d in 0..ch {
        let mut h = vec![0.0; n];
        for t in 0..steps {
            let delta = softplus(p.ssm.dt_bias[d] + dt[t]);
            let x = act[t * ch + d];
            let mut y = 0.0;
            for s in 0..n {
                let a = -p.ssm.a_log.data[d * n + s].exp();
                let mut b = bmat[t * n + s];
                if let Some(bias) = &p.ssm.b_bias {
                    b += bias[s];
                }
                let (abar, bbar) = zoh_exact(delta, a, b);
                h[s] = abar * h[s] + bbar * x;
                y += cmat[t * n + s] * h[s];
            }
            out[t * ch + d] = y + p.ssm.d_skip[d] * x;
        }
    }
    if post_norm {
        for row in out.chunks_mut(ch) {
            let mean: f64 = row.iter().sum::<f64>() / ch as f64;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch as f64;
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / (var + 1e-5).sqrt() * p.post_norm_gamma[c] + p.post_norm_beta[c];
            }
        }
    }
    out
}

/// Unpooled bidirectional block on one raster sequence (`steps x dim`).
pub fn reference_block(tokens: &[f64], steps: usize, p: &BlockParams) -> Vec<f64> {
    let dim = p.input_norm.len();
    let ch = p.w_out.rows;
    let mut u = tokens.to_vec();
    for row in u.chunks_mut(dim) {
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / dim as f64;
        for (c, v) in row.iter_mut().enumerate() {
            *v = *v / (ms + 1e-5).sqrt() * p.input_norm[c];
        }
    }
    let xz = naive_matmul(&u, steps, &p.w_expand);
    let mut x = vec![0.0; steps * ch];
    let mut z = vec![0.0; steps * ch];
    for t in 0..steps {
        x[t * ch..(t + 1) * ch].copy_from_slice(&xz[t * 2 * ch..t * 2 * ch + ch]);
        z[t * ch..(t + 1) * ch].copy_from_slice(&xz[t * 2 * ch + ch..(t + 1) * 2 * ch]);
    }
    let fwd = reference_direction(&x, steps, &p.forward, p.flags.use_post_norm);
    let rev: Vec<f64> = (0..steps).rev().flat_map(|t| x[t * ch..(t + 1) * ch].to_vec()).collect();
    let bwd_rev = reference_direction(&rev, steps, &p.backward, p.flags.use_post_norm);
    let mut y = vec![0.0; steps * ch];
    for t in 0..steps {
        let tb = steps - 1 - t;
        for c in 0..ch {
            let g = silu(z[t * ch + c]);
            y[t * ch + c] = fwd[t * ch + c] * g + bwd_rev[tb * ch + c] * g;
        }
    }
    let proj = naive_matmul(&y, steps, &p.w_out);
    tokens.iter().zip(&proj).map(|(a, b)| a + b).collect()
}
