//! Layer building blocks composed from tape ops.

use std::sync::Arc;

use crate::autodiff::{Tape, Var, GATHER_ZERO};
use crate::error::{Result, SimvaError};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const RMS_NORM_EPS: f64 = 1e-6;

/// `x @ w + b`
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Normalization over the last axis with learned scale and offset.
pub fn layer_norm(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let last = tape.shape(x).len() - 1;
    let mean = tape.mean_axis(x, last, true)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean_axis(sq, last, true)?;
    let var = tape.add_scalar(var, LAYER_NORM_EPS);
    let inv = tape.powf(var, -0.5);
    let normed = tape.mul(centered, inv)?;
    let scaled = tape.mul(normed, weight)?;
    tape.add(scaled, bias)
}

/// `x * scale / sqrt(mean(x^2) + eps)` over the last axis.
pub fn rms_norm(tape: &mut Tape, x: Var, scale: Var) -> Result<Var> {
    let last = tape.shape(x).len() - 1;
    let sq = tape.square(x);
    let ms = tape.mean_axis(sq, last, true)?;
    let ms = tape.add_scalar(ms, RMS_NORM_EPS);
    let inv = tape.powf(ms, -0.5);
    let normed = tape.mul(x, inv)?;
    tape.mul(normed, scale)
}

/// Rows scaled to unit L2 norm over the last axis. Callers must rule out
/// zero rows first.
pub fn l2_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let last = tape.shape(x).len() - 1;
    let sq = tape.square(x);
    let ss = tape.sum_axis(sq, last, true)?;
    let inv = tape.powf(ss, -0.5);
    tape.mul(x, inv)
}

/// Zero-padded "same" 2-D convolution, channels last.
///
/// `x: [N, H, W, Cin]`, `kernel: [kh, kw, Cin, Cout]` (odd sizes),
/// `bias: [Cout]` → `[N, H, W, Cout]`. Implemented as an im2col gather
/// followed by one matrix product.
pub fn conv2d_same(tape: &mut Tape, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(kernel).to_vec();
    if xs.len() != 4 || ks.len() != 4 || ks[2] != xs[3] {
        return Err(SimvaError::shape(format!(
            "conv2d: input {xs:?} and kernel {ks:?} are incompatible"
        )));
    }
    if ks[0].is_multiple_of(2) || ks[1].is_multiple_of(2) {
        return Err(SimvaError::shape(format!("conv2d: kernel {ks:?} must have odd spatial size")));
    }
    let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let index = Arc::new(im2col_index(n, h, w, cin, kh, kw));
    let cols = tape.gather(x, index, &[n, h, w, kh * kw * cin])?;
    let kmat = tape.reshape(kernel, &[kh * kw * cin, cout])?;
    linear(tape, cols, kmat, bias)
}

fn im2col_index(n: usize, h: usize, w: usize, cin: usize, kh: usize, kw: usize) -> Vec<u32> {
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut idx = Vec::with_capacity(n * h * w * kh * kw * cin);
    for b in 0..n {
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ky in 0..kh as isize {
                    for kx in 0..kw as isize {
                        let (sy, sx) = (y + ky - ph, x + kx - pw);
                        let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                        for c in 0..cin {
                            idx.push(if inside {
                                (((b * h + sy as usize) * w + sx as usize) * cin + c) as u32
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Mean cross-entropy of `softmax(logits / tau)` at `target`, for a single
/// logit vector.
pub fn cross_entropy(tape: &mut Tape, logits: Var, target: usize, tau: f64) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 1 || target >= s[0] {
        return Err(SimvaError::shape(format!(
            "cross entropy: target {target} invalid for logits of shape {s:?}"
        )));
    }
    let scaled = tape.scale(logits, 1.0 / tau);
    let logp = tape.log_softmax_last(scaled);
    let picked = tape.narrow(logp, 0, target, 1)?;
    let picked = tape.reshape(picked, &[])?;
    Ok(tape.neg(picked))
}
