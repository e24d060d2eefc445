//! Deterministic stand-ins for the image and text encoders, the synthetic
//! moving-sprite dataset, and feature file I/O.
//!
//! The stub image encoder is a fixed, seeded random projection of raw patch
//! pixels followed by `tanh`, computed in `f32`. Features are stored widened
//! to `f64` (exactly, so files tagged `f32` round-trip bitwise).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Result, SimvaError};
use crate::params::{DType, ParameterStore};
use crate::rng::{derive_seed, rng_from, str_key};
use crate::tensor::Tensor;

/// Raw clip: `frames` is `T x H0 x W0 x 3` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub label: Option<usize>,
    pub clip_id: String,
}

impl VideoClip {
    pub fn new(frames: Tensor, label: Option<usize>, clip_id: impl Into<String>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[0] == 0 || s[3] != 3 {
            return Err(SimvaError::shape(format!(
                "clip frames must be T x H0 x W0 x 3 with T >= 1, got {s:?}"
            )));
        }
        Ok(VideoClip {
            frames,
            label,
            clip_id: clip_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Same clip with frames reordered: output frame `i` is input frame
    /// `order[i]`.
    pub fn reorder_frames(&self, order: &[usize]) -> VideoClip {
        let per = self.frames.len() / self.num_frames();
        let src = self.frames.data();
        let mut data = Vec::with_capacity(self.frames.len());
        for &t in order {
            data.extend_from_slice(&src[t * per..(t + 1) * per]);
        }
        let mut shape = self.frames.shape().to_vec();
        shape[0] = order.len();
        VideoClip {
            frames: Tensor::new(shape, data).expect("same size"),
            label: self.label,
            clip_id: format!("{}-reordered", self.clip_id),
        }
    }
}

/// Encoder output for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVideo {
    /// `T x H x W x D`
    pub patch_features: Tensor,
    /// `T x D`
    pub cls_tokens: Tensor,
    pub clip_id: String,
}

impl EncodedVideo {
    pub fn new(patch_features: Tensor, cls_tokens: Tensor, clip_id: impl Into<String>) -> Result<Self> {
        let ps = patch_features.shape();
        let cs = cls_tokens.shape();
        if ps.len() != 4 || ps.contains(&0) {
            return Err(SimvaError::shape(format!("patch features must be non-empty T x H x W x D, got {ps:?}")));
        }
        if cs != [ps[0], ps[3]] {
            return Err(SimvaError::shape(format!(
                "cls tokens {cs:?} do not match patch features {ps:?}"
            )));
        }
        if !patch_features.all_finite() {
            return Err(SimvaError::NonFinite("patch_features".into()));
        }
        if !cls_tokens.all_finite() {
            return Err(SimvaError::NonFinite("cls_tokens".into()));
        }
        Ok(EncodedVideo {
            patch_features,
            cls_tokens,
            clip_id: clip_id.into(),
        })
    }

    pub fn frames(&self) -> usize {
        self.patch_features.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.patch_features.shape()[1], self.patch_features.shape()[2])
    }

    pub fn dim(&self) -> usize {
        self.patch_features.shape()[3]
    }
}

/// Class text embeddings, `N_C x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingSet {
    pub embeddings: Tensor,
    pub class_names: Vec<String>,
}

impl TextEmbeddingSet {
    pub fn new(embeddings: Tensor, class_names: Vec<String>) -> Result<Self> {
        let s = embeddings.shape();
        if s.len() != 2 || s[0] != class_names.len() || s[0] == 0 || s[1] == 0 {
            return Err(SimvaError::shape(format!(
                "text embeddings {s:?} do not match {} class names",
                class_names.len()
            )));
        }
        if !embeddings.all_finite() {
            return Err(SimvaError::NonFinite("text embeddings".into()));
        }
        Ok(TextEmbeddingSet {
            embeddings,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Rows `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<TextEmbeddingSet> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut names = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.num_classes() {
                return Err(SimvaError::validation(format!(
                    "class index {i} out of range for {} classes",
                    self.num_classes()
                )));
            }
            data.extend_from_slice(&self.embeddings.data()[i * d..(i + 1) * d]);
            names.push(self.class_names[i].clone());
        }
        TextEmbeddingSet::new(Tensor::new([indices.len(), d], data)?, names)
    }
}

/// Stub image encoder: `tanh(W x + b)` per patch with a seeded projection
/// `W` (`patch*patch*3 x D`) and bias `b`; the CLS token is the same map
/// applied to the frame's mean patch.
pub fn encode_video_stub(clip: &VideoClip, dim: usize, patch: usize, seed: u64) -> Result<EncodedVideo> {
    let s = clip.frames.shape();
    let (t, h0, w0) = (s[0], s[1], s[2]);
    if patch == 0 || dim == 0 {
        return Err(SimvaError::validation("patch size and feature dim must be positive"));
    }
    if h0 % patch != 0 {
        return Err(SimvaError::shape(format!("height H0={h0} is not divisible by patch size {patch}")));
    }
    if w0 % patch != 0 {
        return Err(SimvaError::shape(format!("width W0={w0} is not divisible by patch size {patch}")));
    }
    let (h, w) = (h0 / patch, w0 / patch);
    let fan_in = patch * patch * 3;
    let (proj, bias) = stub_projection(fan_in, dim, seed);

    let px = clip.frames.data();
    let mut feats = vec![0.0f64; t * h * w * dim];
    let mut cls = vec![0.0f64; t * dim];
    let mut patch_buf = vec![0.0f32; fan_in];
    let mut mean_buf = vec![0.0f32; fan_in];
    for ti in 0..t {
        mean_buf.fill(0.0);
        for i in 0..h {
            for j in 0..w {
                let mut k = 0;
                for py in 0..patch {
                    for pxi in 0..patch {
                        let base = ((ti * h0 + i * patch + py) * w0 + j * patch + pxi) * 3;
                        for c in 0..3 {
                            patch_buf[k] = px[base + c] as f32;
                            k += 1;
                        }
                    }
                }
                for (m, &p) in mean_buf.iter_mut().zip(&patch_buf) {
                    *m += p;
                }
                let out = &mut feats[((ti * h + i) * w + j) * dim..((ti * h + i) * w + j + 1) * dim];
                project(&patch_buf, &proj, &bias, out);
            }
        }
        let inv = 1.0 / (h * w) as f32;
        mean_buf.iter_mut().for_each(|m| *m *= inv);
        project(&mean_buf, &proj, &bias, &mut cls[ti * dim..(ti + 1) * dim]);
    }
    EncodedVideo::new(
        Tensor::new([t, h, w, dim], feats)?,
        Tensor::new([t, dim], cls)?,
        clip.clip_id.clone(),
    )
}

fn stub_projection(fan_in: usize, dim: usize, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut rng = rng_from(seed, &[str_key("image-encoder")]);
    let scale = 1.5 / (fan_in as f32).sqrt();
    let proj = (0..fan_in * dim)
        .map(|_| rng.sample::<f32, _>(StandardNormal) * scale)
        .collect();
    let bias = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal) * 0.5).collect();
    (proj, bias)
}

fn project(x: &[f32], proj: &[f32], bias: &[f32], out: &mut [f64]) {
    let dim = bias.len();
    let mut acc = bias.to_vec();
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (a, &p) in acc.iter_mut().zip(&proj[k * dim..(k + 1) * dim]) {
            *a += xk * p;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a.tanh() as f64;
    }
}

/// Stub text encoder: each name gets a Gaussian vector drawn from a stream
/// keyed by `(seed, name)`, so a name's row does not depend on which other
/// names are present.
pub fn encode_text_stub(class_names: &[String], dim: usize, seed: u64) -> Result<TextEmbeddingSet> {
    if class_names.is_empty() {
        return Err(SimvaError::validation("class name list is empty"));
    }
    let mut seen = HashSet::new();
    for n in class_names {
        if !seen.insert(n.as_str()) {
            return Err(SimvaError::validation(format!("duplicate class name `{n}`")));
        }
    }
    let mut data = Vec::with_capacity(class_names.len() * dim);
    for n in class_names {
        let mut rng = rng_from(seed, &[str_key("text-encoder"), str_key(n)]);
        data.extend((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal) as f64));
    }
    TextEmbeddingSet::new(Tensor::new([class_names.len(), dim], data)?, class_names.to_vec())
}

/// Where a sprite starts (pixels, `(y, x)`) and how it moves
/// (patches per frame, `(dy, dx)`). Motion wraps around the frame edges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpriteTrack {
    pub start: (f64, f64),
    pub velocity: (f64, f64),
}

/// Rendering parameters shared by every clip of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpriteStyle {
    /// Gaussian radius of the sprite, pixels.
    pub sigma: f64,
    pub color: [f64; 3],
    pub background: f64,
    /// Amplitude of the static per-clip background texture.
    pub texture: f64,
}

impl Default for SpriteStyle {
    fn default() -> Self {
        SpriteStyle {
            sigma: 3.0,
            color: [0.95, 0.75, 0.25],
            background: 0.2,
            texture: 0.05,
        }
    }
}

/// Render a Gaussian sprite moving over a textured background.
pub fn render_sprite_clip(
    frames: usize,
    (h0, w0): (usize, usize),
    patch: usize,
    track: SpriteTrack,
    style: &SpriteStyle,
    texture_seed: u64,
) -> Tensor {
    let mut rng = rng_from(texture_seed, &[str_key("texture")]);
    let texture: Vec<f64> = (0..h0 * w0 * 3)
        .map(|_| style.background + style.texture * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let wrap = |d: f64, n: f64| {
        let d = d.rem_euclid(n);
        d.min(n - d)
    };
    let two_s2 = 2.0 * style.sigma * style.sigma;
    let mut data = Vec::with_capacity(frames * h0 * w0 * 3);
    for t in 0..frames {
        let cy = track.start.0 + track.velocity.0 * patch as f64 * t as f64;
        let cx = track.start.1 + track.velocity.1 * patch as f64 * t as f64;
        for y in 0..h0 {
            for x in 0..w0 {
                // Pixel centres sit at +0.5.
                let dy = wrap(y as f64 + 0.5 - cy, h0 as f64);
                let dx = wrap(x as f64 + 0.5 - cx, w0 as f64);
                let a = (-(dy * dy + dx * dx) / two_s2).exp();
                for c in 0..3 {
                    let bg = texture[(y * w0 + x) * 3 + c];
                    data.push((bg * (1.0 - a) + style.color[c] * a).clamp(0.0, 1.0));
                }
            }
        }
    }
    Tensor::new([frames, h0, w0, 3], data).expect("rendered size")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Per-class velocity `(dy, dx)` in patches per frame. Empty means
    /// [`default_motion_profiles`].
    pub motion_profiles: Vec<[f64; 2]>,
    pub style: SpriteStyle,
    /// Draw one background texture for the whole dataset instead of one
    /// per clip.
    pub shared_background: bool,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_classes: 8,
            clips_per_class: 8,
            frames: 8,
            height: 32,
            width: 32,
            patch: 8,
            motion_profiles: Vec::new(),
            style: SpriteStyle::default(),
            shared_background: false,
            seed: 0,
        }
    }
}

/// The eight king-move velocities (one patch per frame along each axis and
/// diagonal), cycled with growing speed when more classes are requested.
pub fn default_motion_profiles(n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let angle = 2.0 * PI * (k % 8) as f64 / 8.0;
            let speed = 1.0 + 0.5 * (k / 8) as f64;
            let (dy, dx) = (angle.sin(), angle.cos());
            // Snap diagonals to whole patches so all eight are king moves.
            let snap = |v: f64| if v.abs() < 1e-9 { 0.0 } else { v.signum() };
            [snap(dy) * speed, snap(dx) * speed]
        })
        .collect()
}

impl SyntheticDatasetSpec {
    pub fn profiles(&self) -> Vec<[f64; 2]> {
        if self.motion_profiles.is_empty() {
            default_motion_profiles(self.n_classes)
        } else {
            self.motion_profiles.clone()
        }
    }

    /// Human-readable class names derived from the motion profiles.
    pub fn class_names(&self) -> Vec<String> {
        self.profiles()
            .iter()
            .map(|[dy, dx]| format!("sprite moving dy={dy:+.2} dx={dx:+.2} patches per frame"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(SimvaError::validation("a dataset needs at least 2 classes"));
        }
        if self.clips_per_class == 0 || self.frames == 0 {
            return Err(SimvaError::validation("clips_per_class and frames must be positive"));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(SimvaError::shape(format!(
                "frame {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        let p = self.profiles();
        if p.len() != self.n_classes {
            return Err(SimvaError::validation(format!(
                "{} motion profiles for {} classes",
                p.len(),
                self.n_classes
            )));
        }
        let names: HashSet<_> = self.class_names().into_iter().collect();
        if names.len() != self.n_classes {
            return Err(SimvaError::validation("motion profiles must be distinct"));
        }
        Ok(())
    }
}

/// One clip per `(class, k)` with a uniformly random start position over a
/// static texture (per clip, or shared when `shared_background` is set); the
/// class only determines the velocity. Clips are
/// ordered by class, then by `k`.
pub fn make_synthetic_dataset(spec: &SyntheticDatasetSpec) -> Result<Vec<VideoClip>> {
    spec.validate()?;
    let profiles = spec.profiles();
    let jobs: Vec<(usize, usize)> = (0..spec.n_classes)
        .flat_map(|c| (0..spec.clips_per_class).map(move |k| (c, k)))
        .collect();
    jobs.into_par_iter()
        .map(|(c, k)| {
            let mut rng = rng_from(spec.seed, &[str_key("clip"), c as u64, k as u64]);
            let start = (
                rng.random::<f64>() * spec.height as f64,
                rng.random::<f64>() * spec.width as f64,
            );
            let clip_texture = rng.random::<u64>();
            let texture_seed = if spec.shared_background {
                derive_seed(spec.seed, &[str_key("background")])
            } else {
                clip_texture
            };
            let [dy, dx] = profiles[c];
            let frames = render_sprite_clip(
                spec.frames,
                (spec.height, spec.width),
                spec.patch,
                SpriteTrack {
                    start,
                    velocity: (dy, dx),
                },
                &spec.style,
                texture_seed,
            );
            VideoClip::new(frames, Some(c), format!("syn-{}-c{c}-k{k}", spec.seed))
        })
        .collect()
}

/// Either kind of feature file.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureFile {
    Video(EncodedVideo),
    Text(TextEmbeddingSet),
}

const KIND: &str = "kind";

pub fn save_video_features(path: impl AsRef<Path>, video: &EncodedVideo) -> Result<()> {
    let mut s = ParameterStore::new();
    s.insert_with_dtype("patch_features", video.patch_features.clone(), f32_if_exact(&video.patch_features))?;
    s.insert_with_dtype("cls_tokens", video.cls_tokens.clone(), f32_if_exact(&video.cls_tokens))?;
    s.metadata.extra.insert(KIND.into(), "encoded_video".into());
    s.metadata.extra.insert("clip_id".into(), video.clip_id.clone().into());
    container::save(path, &s, None)
}

pub fn save_text_features(path: impl AsRef<Path>, texts: &TextEmbeddingSet) -> Result<()> {
    let mut s = ParameterStore::new();
    s.insert_with_dtype("embeddings", texts.embeddings.clone(), f32_if_exact(&texts.embeddings))?;
    s.metadata.extra.insert(KIND.into(), "text_embeddings".into());
    s.metadata
        .extra
        .insert("class_names".into(), serde_json::to_value(&texts.class_names)?);
    container::save(path, &s, None)
}

fn f32_if_exact(t: &Tensor) -> DType {
    if t.data().iter().all(|&x| (x as f32) as f64 == x) {
        DType::F32
    } else {
        DType::F64
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let ck = container::load(path)?;
    let s = ck.store;
    let kind = s.metadata.extra.get(KIND).and_then(|v| v.as_str()).unwrap_or("");
    match kind {
        "encoded_video" => {
            let id = s
                .metadata
                .extra
                .get("clip_id")
                .and_then(|v| v.as_str())
                .unwrap_or_default()
                .to_string();
            Ok(FeatureFile::Video(EncodedVideo::new(
                s.get("patch_features")?.clone(),
                s.get("cls_tokens")?.clone(),
                id,
            )?))
        }
        "text_embeddings" => {
            let names: Vec<String> = serde_json::from_value(
                s.metadata
                    .extra
                    .get("class_names")
                    .cloned()
                    .ok_or_else(|| SimvaError::format("text feature file lacks class_names"))?,
            )?;
            Ok(FeatureFile::Text(TextEmbeddingSet::new(s.get("embeddings")?.clone(), names)?))
        }
        other => Err(SimvaError::format(format!("unknown feature file kind `{other}`"))),
    }
}
