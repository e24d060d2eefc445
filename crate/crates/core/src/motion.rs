//! Motion-aware modulation: offsets estimated from adjacent frames scale the
//! spatially aggregated volume by `1 + gamma`.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var, GATHER_ZERO};
use crate::error::{Result, SimvaError};
use crate::features::EncodedVideo;
use crate::nn::{conv2d_same, linear};
use crate::params::{BoundParams, ParameterStore};
use crate::rng::normal_tensor;
use crate::similarity::{EmbeddedVolume, StageTag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionModulatorParams {
    /// `3 x 3 x 2D x 2` offset convolution over concatenated frame pairs.
    pub psi_weight: Tensor,
    pub psi_bias: Tensor,
    /// `2 x d_f` pointwise lift of the centered offsets.
    pub phi_weight: Tensor,
    pub phi_bias: Tensor,
    /// Fixed gain scale.
    pub alpha: f64,
}

impl MotionModulatorParams {
    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn init(rng: &mut impl Rng, feature_dim: usize, d_f: usize, std: f64, alpha: f64) -> Self {
        MotionModulatorParams {
            psi_weight: normal_tensor(rng, &[3, 3, 2 * feature_dim, 2], std),
            psi_bias: Tensor::zeros([2]),
            phi_weight: normal_tensor(rng, &[2, d_f], std),
            phi_bias: Tensor::zeros([d_f]),
            alpha,
        }
    }

    pub fn count(feature_dim: usize, d_f: usize) -> usize {
        9 * 2 * feature_dim * 2 + 2 + 2 * d_f + d_f
    }

    pub fn write_to(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}psi.weight"), self.psi_weight.clone())?;
        store.insert(format!("{prefix}psi.bias"), self.psi_bias.clone())?;
        store.insert(format!("{prefix}phi.weight"), self.phi_weight.clone())?;
        store.insert(format!("{prefix}phi.bias"), self.phi_bias.clone())
    }

    pub fn read_from(store: &ParameterStore, prefix: &str, alpha: f64) -> Result<Self> {
        let g = |n: &str| store.get(&format!("{prefix}{n}")).cloned();
        Ok(MotionModulatorParams {
            psi_weight: g("psi.weight")?,
            psi_bias: g("psi.bias")?,
            phi_weight: g("phi.weight")?,
            phi_bias: g("phi.bias")?,
            alpha,
        })
    }

    fn bind(&self, tape: &mut Tape) -> Result<MotionVars> {
        let mut store = ParameterStore::new();
        self.write_to(&mut store, "")?;
        MotionVars::from_bound(&store.bind(tape), "", self.alpha)
    }
}

pub(crate) struct MotionVars {
    psi: (Var, Var),
    phi: (Var, Var),
    alpha: f64,
}

impl MotionVars {
    pub(crate) fn from_bound(bp: &BoundParams, prefix: &str, alpha: f64) -> Result<Self> {
        let g = |n: &str| bp.get(&format!("{prefix}{n}"));
        Ok(MotionVars {
            psi: (g("psi.weight")?, g("psi.bias")?),
            phi: (g("phi.weight")?, g("phi.bias")?),
            alpha,
        })
    }
}

/// Offsets and gains for every frame but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    /// `(T-1) x 2 x H x W`, each entry in `(-1, 1)`.
    pub raw: Tensor,
    /// `raw` minus its per-channel spatial mean.
    pub centered: Tensor,
    /// `(T-1) x H x W x d_f`, each entry in `(-alpha, alpha)`.
    pub gain: Tensor,
}

impl MotionField {
    pub fn frames(&self) -> usize {
        self.gain.shape()[0]
    }
}

pub(crate) struct MotionVarsOut {
    /// `[T-1, H, W, 2]`
    pub raw: Var,
    pub centered: Var,
    /// `[T-1, H, W, d_f]`
    pub gain: Var,
}

/// `[T, H, W, D]` → `[T-1, H, W, 2D]` with frame `t` then frame `t+1`.
fn pair_index(t: usize, hw: usize, d: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity((t - 1) * hw * 2 * d);
    for f in 0..t - 1 {
        for p in 0..hw {
            idx.extend((0..d).map(|c| ((f * hw + p) * d + c) as u32));
            idx.extend((0..d).map(|c| (((f + 1) * hw + p) * d + c) as u32));
        }
    }
    idx
}

/// Subtract the spatial mean of each channel of `u: [N, H, W, C]`.
fn center_vars(tape: &mut Tape, u: Var) -> Result<Var> {
    let s = tape.shape(u).to_vec();
    let flat = tape.reshape(u, &[s[0], s[1] * s[2], s[3]])?;
    let mean = tape.mean_axis(flat, 1, true)?;
    let r = tape.sub(flat, mean)?;
    tape.reshape(r, &s)
}

/// Offsets, centered offsets and gains from raw patch features
/// `[T, H, W, D]`. `None` when `T == 1`.
pub(crate) fn motion_vars(tape: &mut Tape, features: Var, v: &MotionVars) -> Result<Option<MotionVarsOut>> {
    let s = tape.shape(features).to_vec();
    let (t, h, w, d) = (s[0], s[1], s[2], s[3]);
    let ks = tape.shape(v.psi.0).to_vec();
    if ks != [3, 3, 2 * d, 2] {
        return Err(SimvaError::shape(format!(
            "offset convolution expects 2D = {} input channels (kernel {ks:?}) but features have D = {d}",
            ks.get(2).copied().unwrap_or(0)
        )));
    }
    if t < 2 {
        return Ok(None);
    }
    let pairs = tape.gather(features, Arc::new(pair_index(t, h * w, d)), &[t - 1, h, w, 2 * d])?;
    let u = conv2d_same(tape, pairs, v.psi.0, Some(v.psi.1))?;
    let raw = tape.tanh(u);
    let centered = center_vars(tape, raw)?;
    let g = linear(tape, centered, v.phi.0, Some(v.phi.1))?;
    let g = tape.tanh(g);
    let gain = tape.scale(g, v.alpha);
    Ok(Some(MotionVarsOut { raw, centered, gain }))
}

/// `z * (1 + gain)` on a slice-major volume `[T, M, H, W, d]`; the last
/// frame is left untouched.
pub(crate) fn modulate_vars(tape: &mut Tape, z: Var, gain: Var) -> Result<Var> {
    let zs = tape.shape(z).to_vec();
    let gs = tape.shape(gain).to_vec();
    let (t, h, w, d) = (zs[0], zs[2], zs[3], zs[4]);
    if gs != [t.saturating_sub(1), h, w, d] {
        return Err(SimvaError::shape(format!(
            "gain {gs:?} does not fit a volume with T={t}, H={h}, W={w}, d_f={d}"
        )));
    }
    let per_frame = h * w * d;
    let idx: Vec<u32> = (0..t * per_frame)
        .map(|k| if k < (t - 1) * per_frame { k as u32 } else { GATHER_ZERO })
        .collect();
    let padded = tape.gather(gain, Arc::new(idx), &[t, 1, h, w, d])?;
    let factor = tape.add_scalar(padded, 1.0);
    tape.mul(z, factor)
}

/// `[N, H, W, C]` → `[N, C, H, W]`
fn channels_first(t: &Tensor) -> Tensor {
    t.permute(&[0, 3, 1, 2])
}

pub fn estimate_motion(video: &EncodedVideo, params: &MotionModulatorParams) -> Result<MotionField> {
    let mut tape = Tape::new();
    let v = params.bind(&mut tape)?;
    let f = tape.constant(video.patch_features.clone());
    let (h, w) = video.grid();
    let d_f = params.phi_weight.shape().get(1).copied().unwrap_or(0);
    match motion_vars(&mut tape, f, &v)? {
        Some(out) => Ok(MotionField {
            raw: channels_first(tape.value(out.raw)),
            centered: channels_first(tape.value(out.centered)),
            gain: tape.value(out.gain).clone(),
        }),
        None => Ok(MotionField {
            raw: Tensor::zeros([0, 2, h, w]),
            centered: Tensor::zeros([0, 2, h, w]),
            gain: Tensor::zeros([0, h, w, d_f]),
        }),
    }
}

/// Per-channel spatial mean removal on offsets laid out `(T-1) x 2 x H x W`.
pub fn center_offsets(raw: &Tensor) -> Result<Tensor> {
    if raw.ndim() != 4 {
        return Err(SimvaError::shape(format!("offsets must be rank 4, got {:?}", raw.shape())));
    }
    let mut tape = Tape::new();
    let u = tape.constant(raw.permute(&[0, 2, 3, 1]));
    let r = center_vars(&mut tape, u)?;
    Ok(channels_first(tape.value(r)))
}

pub fn modulate(z: &EmbeddedVolume, field: &MotionField) -> Result<EmbeddedVolume> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.to_slice_major());
    let g = tape.constant(field.gain.clone());
    let out = modulate_vars(&mut tape, zv, g)?;
    EmbeddedVolume::from_slice_major(tape.value(out), StageTag::ZsaMod)
}
