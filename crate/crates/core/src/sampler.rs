//! Global video-text prior and top-M candidate vocabulary selection.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SimvaError};
use crate::features::{EncodedVideo, TextEmbeddingSet};
use crate::nn::l2_normalize;
use crate::rng::rng_from;
use crate::tensor::Tensor;

pub const DEFAULT_NOISE_HIGH: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalAlignment {
    /// Unit-norm mean of the per-frame CLS tokens.
    pub video_vec: Tensor,
    /// Cosine of `video_vec` with every class embedding (`N_C`).
    pub prior_scores: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledVocabulary {
    /// Selected class indices, ascending.
    pub indices: Vec<usize>,
    /// Rows of the text embeddings for `indices`, `M x D`.
    pub restricted_embeddings: Tensor,
    pub noise_applied: bool,
    pub gt_index: Option<usize>,
}

impl SampledVocabulary {
    /// Every class, in order.
    pub fn full(texts: &TextEmbeddingSet, gt: Option<usize>) -> Result<Self> {
        if let Some(g) = gt {
            check_gt(g, texts.num_classes())?;
        }
        Ok(SampledVocabulary {
            indices: (0..texts.num_classes()).collect(),
            restricted_embeddings: texts.embeddings.clone(),
            noise_applied: false,
            gt_index: gt,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Position of class `c` within `indices`.
    pub fn position(&self, c: usize) -> Option<usize> {
        self.indices.binary_search(&c).ok()
    }
}

fn check_gt(gt: usize, n: usize) -> Result<()> {
    if gt >= n {
        return Err(SimvaError::validation(format!(
            "ground-truth class {gt} out of range for {n} classes"
        )));
    }
    Ok(())
}

/// Tape version of [`global_alignment`]: returns `(video_vec, prior_scores)`.
pub fn global_alignment_vars(tape: &mut Tape, cls_tokens: Var, texts: Var) -> Result<(Var, Var)> {
    let mean = tape.mean_axis(cls_tokens, 0, false)?;
    if tape.value(mean).norm() == 0.0 {
        return Err(SimvaError::Singularity(
            "mean CLS token is zero; the global video vector is undefined".into(),
        ));
    }
    check_rows_nonzero(tape.value(texts), "text embedding row")?;
    let v = l2_normalize(tape, mean)?;
    let tn = l2_normalize(tape, texts)?;
    let d = tape.shape(v)[0];
    let col = tape.reshape(v, &[d, 1])?;
    let scores = tape.matmul(tn, col)?;
    let n = tape.shape(scores)[0];
    let scores = tape.reshape(scores, &[n])?;
    Ok((v, scores))
}

pub(crate) fn check_rows_nonzero(t: &Tensor, what: &str) -> Result<()> {
    let d = *t.shape().last().unwrap_or(&1);
    if let Some(c) = t.data().chunks(d).position(|r| r.iter().all(|&x| x == 0.0)) {
        return Err(SimvaError::Singularity(format!("{what} {c} has zero norm")));
    }
    Ok(())
}

pub fn global_alignment(video: &EncodedVideo, texts: &TextEmbeddingSet) -> Result<GlobalAlignment> {
    if video.dim() != texts.dim() {
        return Err(SimvaError::shape(format!(
            "video feature dim {} != text dim {}",
            video.dim(),
            texts.dim()
        )));
    }
    let mut tape = Tape::new();
    let cls = tape.constant(video.cls_tokens.clone());
    let txt = tape.constant(texts.embeddings.clone());
    let (v, s) = global_alignment_vars(&mut tape, cls, txt)?;
    Ok(GlobalAlignment {
        video_vec: tape.value(v).clone(),
        prior_scores: tape.value(s).clone(),
    })
}

/// [`sample_classes_with_noise`] with the default noise bound of 0.5.
pub fn sample_classes(
    align: &GlobalAlignment,
    texts: &TextEmbeddingSet,
    m: usize,
    training: bool,
    gt: Option<usize>,
    rng_seed: u64,
) -> Result<SampledVocabulary> {
    sample_classes_with_noise(align, texts, m, training, gt, rng_seed, DEFAULT_NOISE_HIGH)
}

/// Top-`m` classes by prior score.
///
/// In training mode each class score gets independent `U[0, noise_high)`
/// noise before ranking, and if the ground truth misses the cut it replaces
/// the lowest-ranked selected class. Ties rank the lower index first. In
/// eval mode there is no noise and `gt` is ignored.
pub fn sample_classes_with_noise(
    align: &GlobalAlignment,
    texts: &TextEmbeddingSet,
    m: usize,
    training: bool,
    gt: Option<usize>,
    rng_seed: u64,
    noise_high: f64,
) -> Result<SampledVocabulary> {
    let n = texts.num_classes();
    if m < 1 {
        return Err(SimvaError::validation("M must be at least 1"));
    }
    if align.prior_scores.len() != n {
        return Err(SimvaError::shape(format!(
            "{} prior scores for {n} classes",
            align.prior_scores.len()
        )));
    }
    let gt = if training {
        let g = gt.ok_or_else(|| SimvaError::validation("training-mode sampling needs a ground-truth class"))?;
        check_gt(g, n)?;
        Some(g)
    } else {
        None
    };
    if m >= n {
        return SampledVocabulary::full(texts, gt);
    }
    let mut scores = align.prior_scores.data().to_vec();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SimvaError::NonFinite("prior_scores".into()));
    }
    if training && noise_high > 0.0 {
        let mut rng = rng_from(rng_seed, &[]);
        for s in scores.iter_mut() {
            *s += rng.random_range(0.0..noise_high);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut indices: Vec<usize> = order[..m].to_vec();
    if let Some(g) = gt {
        if !indices.contains(&g) {
            // `indices` is in rank order, so the last one scored lowest.
            *indices.last_mut().expect("m >= 1") = g;
        }
    }
    indices.sort_unstable();
    Ok(SampledVocabulary {
        restricted_embeddings: texts.select(&indices)?.embeddings,
        indices,
        noise_applied: training && noise_high > 0.0,
        gt_index: gt,
    })
}
