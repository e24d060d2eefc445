//! Patch-text cosine similarity volume and its 7x7 convolutional embedding.
//!
//! Inside the pipeline the embedded volume is kept in *slice-major* layout
//! `[T, M, H, W, d_f]` so that each `(t, c)` map is contiguous; the public
//! [`EmbeddedVolume`] type uses `[T, H, W, M, d_f]`.

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SimvaError};
use crate::features::EncodedVideo;
use crate::nn::{conv2d_same, l2_normalize};
use crate::sampler::SampledVocabulary;
use crate::tensor::Tensor;

pub const EMBED_KERNEL: usize = 7;

/// `T x H x W x M` cosines, conditioned on `class_indices`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityVolume {
    pub values: Tensor,
    pub class_indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageTag {
    /// Straight out of the embedding convolution.
    Z0,
    /// After spatial aggregation.
    Zsa,
    /// After motion modulation.
    ZsaMod,
    /// After temporal aggregation.
    Zta,
}

/// `T x H x W x M x d_f` working representation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedVolume {
    pub values: Tensor,
    pub stage: StageTag,
}

impl EmbeddedVolume {
    pub fn new(values: Tensor, stage: StageTag) -> Result<Self> {
        if values.ndim() != 5 {
            return Err(SimvaError::shape(format!(
                "embedded volume must be T x H x W x M x d_f, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(SimvaError::NonFinite(format!("{stage:?} volume")));
        }
        Ok(EmbeddedVolume { values, stage })
    }

    /// `[T, H, W, M, d]` → `[T, M, H, W, d]`
    pub(crate) fn to_slice_major(&self) -> Tensor {
        self.values.permute(&[0, 3, 1, 2, 4])
    }

    /// `[T, M, H, W, d]` → public layout.
    pub(crate) fn from_slice_major(t: &Tensor, stage: StageTag) -> Result<Self> {
        Self::new(t.permute(&[0, 2, 3, 1, 4]), stage)
    }
}

/// Shared 7x7 embedding convolution weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConvParams {
    /// `7 x 7 x 1 x d_f`
    pub kernel: Tensor,
    /// `d_f`
    pub bias: Tensor,
}

/// Cosine similarity of every patch feature with every text row.
///
/// `features: [T, H, W, D]`, `texts: [M, D]` → `[T, H, W, M]`.
pub fn cosine_volume(tape: &mut Tape, features: Var, texts: Var) -> Result<Var> {
    let fs = tape.shape(features).to_vec();
    let ts = tape.shape(texts).to_vec();
    if fs.len() != 4 || ts.len() != 2 || fs[3] != ts[1] {
        return Err(SimvaError::shape(format!(
            "feature dims differ: patches {fs:?} vs texts {ts:?}"
        )));
    }
    let d = fs[3];
    if let Some(p) = tape.value(features).data().chunks(d).position(|r| r.iter().all(|&x| x == 0.0)) {
        let (h, w) = (fs[1], fs[2]);
        return Err(SimvaError::Singularity(format!(
            "patch feature at (t={}, i={}, j={}) has zero norm",
            p / (h * w),
            (p / w) % h,
            p % w
        )));
    }
    crate::sampler::check_rows_nonzero(tape.value(texts), "text embedding row")?;
    let f = l2_normalize(tape, features)?;
    let t = l2_normalize(tape, texts)?;
    let tt = tape.permute(t, &[1, 0])?;
    tape.matmul(f, tt)
}

/// Similarity volume for one clip. Entries are clamped to `[-1, 1]`, which
/// only ever trims a rounding ulp off near-parallel pairs.
pub fn build_similarity(video: &EncodedVideo, vocab: &SampledVocabulary) -> Result<SimilarityVolume> {
    let mut tape = Tape::new();
    let f = tape.constant(video.patch_features.clone());
    let t = tape.constant(vocab.restricted_embeddings.clone());
    let s = cosine_volume(&mut tape, f, t)?;
    Ok(SimilarityVolume {
        values: tape.value(s).map(|v| v.clamp(-1.0, 1.0)),
        class_indices: vocab.indices.clone(),
    })
}

/// `[T, H, W, M]` similarities → `[T, M, H, W, d_f]` embedded volume.
///
/// Every `(t, c)` map is convolved with the same 7x7 kernel, zero-padded by
/// 3 so the grid size is preserved.
pub fn embed_vars(tape: &mut Tape, sim: Var, kernel: Var, bias: Var) -> Result<Var> {
    let s = tape.shape(sim).to_vec();
    if s.len() != 4 {
        return Err(SimvaError::shape(format!("similarity volume must be rank 4, got {s:?}")));
    }
    let ks = tape.shape(kernel).to_vec();
    if ks.len() != 4 || ks[0] != EMBED_KERNEL || ks[1] != EMBED_KERNEL || ks[2] != 1 {
        return Err(SimvaError::shape(format!("embedding kernel must be 7x7x1xd_f, got {ks:?}")));
    }
    let (t, h, w, m) = (s[0], s[1], s[2], s[3]);
    let d_f = ks[3];
    let maps = tape.permute(sim, &[0, 3, 1, 2])?;
    let maps = tape.reshape(maps, &[t * m, h, w, 1])?;
    let z = conv2d_same(tape, maps, kernel, Some(bias))?;
    tape.reshape(z, &[t, m, h, w, d_f])
}

pub fn embed_volume(sim: &SimilarityVolume, params: &EmbedConvParams) -> Result<EmbeddedVolume> {
    let mut tape = Tape::new();
    let s = tape.constant(sim.values.clone());
    let k = tape.constant(params.kernel.clone());
    let b = tape.constant(params.bias.clone());
    let z = embed_vars(&mut tape, s, k, b)?;
    EmbeddedVolume::from_slice_major(tape.value(z), StageTag::Z0)
}
