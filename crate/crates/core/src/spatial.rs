//! Window self-attention over every `(frame, class)` similarity map: a
//! regular-window block followed by a cyclically shifted one.
//!
//! Tokens are the `H x W` grid positions of one map; maps never exchange
//! information, so frames and classes act as a batch dimension.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SimvaError};
use crate::nn::{layer_norm, linear};
use crate::params::{BoundParams, ParameterStore};
use crate::rng::trunc_normal_tensor;
use crate::similarity::{EmbeddedVolume, StageTag};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm window-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowAttentionBlockParams {
    pub norm1_weight: Tensor,
    pub norm1_bias: Tensor,
    /// `d_f x 3 d_f`, columns ordered `[q | k | v]`.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    /// `(2w - 1)^2 x heads`
    pub rel_pos_bias: Option<Tensor>,
    pub norm2_weight: Tensor,
    pub norm2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
    pub window: usize,
    pub heads: usize,
    pub shift: usize,
}

/// Window geometry shared by a block's forward pass and its mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub window: usize,
    pub heads: usize,
    pub shift: usize,
}

impl WindowAttentionBlockParams {
    /// Truncated-normal (std 0.02) linear weights, zero biases, unit norms.
    pub fn init(
        rng: &mut impl Rng,
        d_f: usize,
        mlp_hidden: usize,
        geometry: BlockGeometry,
        rel_pos_bias: bool,
    ) -> Self {
        let BlockGeometry { window, heads, shift } = geometry;
        let table = (2 * window - 1) * (2 * window - 1);
        WindowAttentionBlockParams {
            norm1_weight: Tensor::full([d_f], 1.0),
            norm1_bias: Tensor::zeros([d_f]),
            qkv_weight: trunc_normal_tensor(rng, &[d_f, 3 * d_f], INIT_STD),
            qkv_bias: Tensor::zeros([3 * d_f]),
            proj_weight: trunc_normal_tensor(rng, &[d_f, d_f], INIT_STD),
            proj_bias: Tensor::zeros([d_f]),
            rel_pos_bias: rel_pos_bias.then(|| trunc_normal_tensor(rng, &[table, heads], INIT_STD)),
            norm2_weight: Tensor::full([d_f], 1.0),
            norm2_bias: Tensor::zeros([d_f]),
            fc1_weight: trunc_normal_tensor(rng, &[d_f, mlp_hidden], INIT_STD),
            fc1_bias: Tensor::zeros([mlp_hidden]),
            fc2_weight: trunc_normal_tensor(rng, &[mlp_hidden, d_f], INIT_STD),
            fc2_bias: Tensor::zeros([d_f]),
            window,
            heads,
            shift,
        }
    }

    pub fn geometry(&self) -> BlockGeometry {
        BlockGeometry {
            window: self.window,
            heads: self.heads,
            shift: self.shift,
        }
    }

    /// Analytic scalar count of one block.
    pub fn count(d_f: usize, mlp_hidden: usize, window: usize, heads: usize, rel_pos_bias: bool) -> usize {
        let table = if rel_pos_bias {
            (2 * window - 1) * (2 * window - 1) * heads
        } else {
            0
        };
        4 * d_f + (d_f * 3 * d_f + 3 * d_f) + (d_f * d_f + d_f) + table + (d_f * mlp_hidden + mlp_hidden)
            + (mlp_hidden * d_f + d_f)
    }

    fn entries(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("norm1.weight", &self.norm1_weight),
            ("norm1.bias", &self.norm1_bias),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
        ];
        if let Some(t) = &self.rel_pos_bias {
            v.push(("attn.rel_pos_bias", t));
        }
        v.extend([
            ("norm2.weight", &self.norm2_weight),
            ("norm2.bias", &self.norm2_bias),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]);
        v
    }

    /// Register every array under `prefix` (e.g. `"layers.0.sa.blocks.1."`).
    pub fn write_to(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        for (name, t) in self.entries() {
            store.insert(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn read_from(store: &ParameterStore, prefix: &str, geometry: BlockGeometry) -> Result<Self> {
        let g = |n: &str| store.get(&format!("{prefix}{n}")).cloned();
        let rpb = format!("{prefix}attn.rel_pos_bias");
        Ok(WindowAttentionBlockParams {
            norm1_weight: g("norm1.weight")?,
            norm1_bias: g("norm1.bias")?,
            qkv_weight: g("attn.qkv.weight")?,
            qkv_bias: g("attn.qkv.bias")?,
            proj_weight: g("attn.proj.weight")?,
            proj_bias: g("attn.proj.bias")?,
            rel_pos_bias: store.contains(&rpb).then(|| store.get(&rpb).cloned()).transpose()?,
            norm2_weight: g("norm2.weight")?,
            norm2_bias: g("norm2.bias")?,
            fc1_weight: g("mlp.fc1.weight")?,
            fc1_bias: g("mlp.fc1.bias")?,
            fc2_weight: g("mlp.fc2.weight")?,
            fc2_bias: g("mlp.fc2.bias")?,
            window: geometry.window,
            heads: geometry.heads,
            shift: geometry.shift,
        })
    }

    fn bind(&self, tape: &mut Tape) -> Result<BlockVars> {
        let mut store = ParameterStore::new();
        self.write_to(&mut store, "")?;
        BlockVars::from_bound(&store.bind(tape), "", self.geometry())
    }
}

/// Block weights placed on a tape.
pub(crate) struct BlockVars {
    norm1: (Var, Var),
    qkv: (Var, Var),
    proj: (Var, Var),
    rel_pos_bias: Option<Var>,
    norm2: (Var, Var),
    fc1: (Var, Var),
    fc2: (Var, Var),
    geometry: BlockGeometry,
}

impl BlockVars {
    pub(crate) fn from_bound(bp: &BoundParams, prefix: &str, geometry: BlockGeometry) -> Result<Self> {
        let g = |n: &str| bp.get(&format!("{prefix}{n}"));
        let pair = |w: &str, b: &str| -> Result<(Var, Var)> { Ok((g(w)?, g(b)?)) };
        Ok(BlockVars {
            norm1: pair("norm1.weight", "norm1.bias")?,
            qkv: pair("attn.qkv.weight", "attn.qkv.bias")?,
            proj: pair("attn.proj.weight", "attn.proj.bias")?,
            rel_pos_bias: g("attn.rel_pos_bias").ok(),
            norm2: pair("norm2.weight", "norm2.bias")?,
            fc1: pair("mlp.fc1.weight", "mlp.fc1.bias")?,
            fc2: pair("mlp.fc2.weight", "mlp.fc2.bias")?,
            geometry,
        })
    }
}

fn check_grid(h: usize, w: usize, g: BlockGeometry) -> Result<()> {
    if g.window == 0 || !h.is_multiple_of(g.window) || !w.is_multiple_of(g.window) {
        return Err(SimvaError::shape(format!(
            "window size {} must divide both H={h} and W={w}",
            g.window
        )));
    }
    if g.shift >= g.window {
        return Err(SimvaError::shape(format!(
            "shift {} must be smaller than the window {}",
            g.shift, g.window
        )));
    }
    Ok(())
}

/// Additive attention mask for the shifted block, `[nW, N, N]` with
/// `N = w*w` and windows in row-major order.
///
/// After the cyclic shift some windows hold tokens that were not neighbours
/// on the original grid; pairs from different source regions get `-inf`.
/// With `shift == 0` the mask is all zeros.
pub fn build_shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor> {
    check_grid(h, w, BlockGeometry { window, heads: 1, shift })?;
    let n = window * window;
    let (nwy, nwx) = (h / window, w / window);
    let region = |y: usize, len: usize| -> usize {
        if shift == 0 || y < len - window {
            0
        } else if y < len - shift {
            1
        } else {
            2
        }
    };
    let mut mask = Tensor::zeros([nwy * nwx, n, n]);
    let md = mask.data_mut();
    for wy in 0..nwy {
        for wx in 0..nwx {
            let label = |k: usize| {
                let (py, px) = (k / window, k % window);
                region(wy * window + py, h) * 3 + region(wx * window + px, w)
            };
            let base = (wy * nwx + wx) * n * n;
            for i in 0..n {
                for j in 0..n {
                    if label(i) != label(j) {
                        md[base + i * n + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// `[B, H, W, d]` grid → `[B * nW, w*w, d]` windows, reading the grid
/// cyclically shifted by `shift` towards the origin.
fn partition_index(b: usize, h: usize, w: usize, d: usize, window: usize, shift: usize) -> Vec<u32> {
    let (nwy, nwx) = (h / window, w / window);
    let mut idx = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for py in 0..window {
                    for px in 0..window {
                        let y = (wy * window + py + shift) % h;
                        let x = (wx * window + px + shift) % w;
                        let src = ((bi * h + y) * w + x) * d;
                        idx.extend((0..d).map(|c| (src + c) as u32));
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`partition_index`].
fn merge_index(b: usize, h: usize, w: usize, d: usize, window: usize, shift: usize) -> Vec<u32> {
    let (nwy, nwx) = (h / window, w / window);
    let n = window * window;
    let mut idx = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = ((y + h - shift) % h, (x + w - shift) % w);
                let win = (bi * nwy + sy / window) * nwx + sx / window;
                let src = (win * n + (sy % window) * window + sx % window) * d;
                idx.extend((0..d).map(|c| (src + c) as u32));
            }
        }
    }
    idx
}

/// Gather table turning the bias table `[(2w-1)^2, heads]` into `[heads, N, N]`.
fn rel_pos_index(window: usize, heads: usize) -> Vec<u32> {
    let n = window * window;
    let side = 2 * window - 1;
    let mut idx = Vec::with_capacity(heads * n * n);
    for hd in 0..heads {
        for i in 0..n {
            for j in 0..n {
                let dy = (i / window) as isize - (j / window) as isize + window as isize - 1;
                let dx = (i % window) as isize - (j % window) as isize + window as isize - 1;
                idx.push(((dy as usize * side + dx as usize) * heads + hd) as u32);
            }
        }
    }
    idx
}

/// Multi-head attention inside windows. `xw: [B * nW, N, d]`; returns the
/// projected output and the attention weights `[B * nW * heads, N, N]`.
fn window_attention(tape: &mut Tape, xw: Var, v: &BlockVars, nw: usize, mask: Option<&Tensor>) -> Result<(Var, Var)> {
    let s = tape.shape(xw).to_vec();
    let (bw, n, d) = (s[0], s[1], s[2]);
    let heads = v.geometry.heads;
    let hd = d / heads;
    let qkv = linear(tape, xw, v.qkv.0, Some(v.qkv.1))?;
    let qkv = tape.reshape(qkv, &[bw, n, 3, heads, hd])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = Vec::with_capacity(3);
    for k in 0..3 {
        let p = tape.narrow(qkv, 0, k, 1)?;
        parts.push(tape.reshape(p, &[bw * heads, n, hd])?);
    }
    let q = tape.scale(parts[0], (hd as f64).powf(-0.5));
    let mut scores = tape.bmm(q, parts[1], true)?;
    if let Some(table) = v.rel_pos_bias {
        let bias = tape.gather(table, Arc::new(rel_pos_index(v.geometry.window, heads)), &[heads, n, n])?;
        scores = tape.reshape(scores, &[bw, heads, n, n])?;
        scores = tape.add(scores, bias)?;
    }
    if let Some(m) = mask {
        let mv = tape.constant(m.clone().reshape(vec![nw, 1, n, n])?);
        scores = tape.reshape(scores, &[bw / nw, nw, heads, n, n])?;
        scores = tape.add(scores, mv)?;
    }
    let scores = tape.reshape(scores, &[bw * heads, n, n])?;
    let attn = tape.softmax_last(scores);
    let o = tape.bmm(attn, parts[2], false)?;
    let o = tape.reshape(o, &[bw, heads, n, hd])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[bw, n, d])?;
    Ok((linear(tape, o, v.proj.0, Some(v.proj.1))?, attn))
}

/// One block on `x: [B, H, W, d]`. Also returns the attention weights.
fn block_with_attention(tape: &mut Tape, x: Var, v: &BlockVars) -> Result<(Var, Var)> {
    let s = tape.shape(x).to_vec();
    let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
    let g = v.geometry;
    check_grid(h, w, g)?;
    if g.heads == 0 || d % g.heads != 0 {
        return Err(SimvaError::shape(format!("{} heads do not divide d_f={d}", g.heads)));
    }
    let (win, n) = (g.window, g.window * g.window);
    let nw = (h / win) * (w / win);
    let mask = (g.shift > 0).then(|| build_shift_mask(h, w, win, g.shift)).transpose()?;

    let y = layer_norm(tape, x, v.norm1.0, v.norm1.1)?;
    let yw = tape.gather(y, Arc::new(partition_index(b, h, w, d, win, g.shift)), &[b * nw, n, d])?;
    let (a, attn) = window_attention(tape, yw, v, nw, mask.as_ref())?;
    let a = tape.gather(a, Arc::new(merge_index(b, h, w, d, win, g.shift)), &[b, h, w, d])?;
    let x = tape.add(x, a)?;

    let y = layer_norm(tape, x, v.norm2.0, v.norm2.1)?;
    let y = linear(tape, y, v.fc1.0, Some(v.fc1.1))?;
    let y = tape.gelu(y);
    let y = linear(tape, y, v.fc2.0, Some(v.fc2.1))?;
    Ok((tape.add(x, y)?, attn))
}

/// Both blocks on a slice-major volume `[T, M, H, W, d]`.
pub(crate) fn spatial_vars(tape: &mut Tape, z: Var, blocks: &[BlockVars]) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let mut x = tape.reshape(z, &[s[0] * s[1], s[2], s[3], s[4]])?;
    for b in blocks {
        x = block_with_attention(tape, x, b)?.0;
    }
    tape.reshape(x, &s)
}

/// Refine every `(t, c)` map of `z` with the given blocks in order
/// (regular window, then shifted window).
pub fn spatial_aggregate(z: &EmbeddedVolume, blocks: &[WindowAttentionBlockParams]) -> Result<EmbeddedVolume> {
    let mut tape = Tape::new();
    let vars = blocks.iter().map(|b| b.bind(&mut tape)).collect::<Result<Vec<_>>>()?;
    let x = tape.constant(z.to_slice_major());
    let y = spatial_vars(&mut tape, x, &vars)?;
    EmbeddedVolume::from_slice_major(tape.value(y), StageTag::Zsa)
}

/// Output and attention weights of a single block on one `[H, W, d]` map.
/// Weights come back as `[nW, heads, N, N]`.
pub fn block_forward(x: &Tensor, block: &WindowAttentionBlockParams) -> Result<(Tensor, Tensor)> {
    if x.ndim() != 3 {
        return Err(SimvaError::shape(format!("expected an H x W x d map, got {:?}", x.shape())));
    }
    let mut tape = Tape::new();
    let v = block.bind(&mut tape)?;
    let s = x.shape().to_vec();
    let xv = tape.constant(x.clone().reshape(vec![1, s[0], s[1], s[2]])?);
    let (y, attn) = block_with_attention(&mut tape, xv, &v)?;
    let w = block.window;
    let nw = (s[0] / w) * (s[1] / w);
    let n = w * w;
    Ok((
        tape.value(y).clone().reshape(s)?,
        tape.value(attn).clone().reshape(vec![nw, block.heads, n, n])?,
    ))
}

/// Attention sublayer alone (no norm, no residual) on pre-partitioned
/// windows `[nW, N, d]`, without masking.
pub fn window_attention_output(windows: &Tensor, block: &WindowAttentionBlockParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = block.bind(&mut tape)?;
    let nw = windows.shape()[0];
    let x = tape.constant(windows.clone());
    let (o, _) = window_attention(&mut tape, x, &v, nw, None)?;
    Ok(tape.value(o).clone())
}
