//! Per-position linear scoring, space-time pooling and the training loss
//! `L = L_agg + L_cls`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SimvaError};
use crate::nn::{cross_entropy, linear};
use crate::params::{BoundParams, ParameterStore};
use crate::rng::trunc_normal_tensor;
use crate::sampler::{GlobalAlignment, SampledVocabulary};
use crate::similarity::EmbeddedVolume;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `d_f x 1`
    pub weight: Tensor,
    /// `1`
    pub bias: Tensor,
    pub tau_agg: f64,
    pub tau_cls: f64,
}

impl HeadParams {
    pub fn init(rng: &mut impl Rng, d_f: usize, tau_agg: f64, tau_cls: f64) -> Self {
        HeadParams {
            weight: trunc_normal_tensor(rng, &[d_f, 1], 0.02),
            bias: Tensor::zeros([1]),
            tau_agg,
            tau_cls,
        }
    }

    pub fn count(d_f: usize) -> usize {
        d_f + 1
    }

    pub fn write_to(&self, store: &mut ParameterStore, prefix: &str) -> Result<()> {
        store.insert(format!("{prefix}linear.weight"), self.weight.clone())?;
        store.insert(format!("{prefix}linear.bias"), self.bias.clone())
    }

    pub fn read_from(store: &ParameterStore, prefix: &str, tau_agg: f64, tau_cls: f64) -> Result<Self> {
        Ok(HeadParams {
            weight: store.get(&format!("{prefix}linear.weight"))?.clone(),
            bias: store.get(&format!("{prefix}linear.bias"))?.clone(),
            tau_agg,
            tau_cls,
        })
    }
}

/// Scalar losses plus the logits that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss_agg: f64,
    pub loss_cls: f64,
    pub loss_total: f64,
    /// Pooled scores over the sampled vocabulary, before `tau_agg`.
    pub logits: Tensor,
    /// `S_global / tau_cls` over every class.
    pub global_logits: Tensor,
}

pub(crate) struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl HeadVars {
    pub(crate) fn from_bound(bp: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(HeadVars {
            weight: bp.get(&format!("{prefix}linear.weight"))?,
            bias: bp.get(&format!("{prefix}linear.bias"))?,
        })
    }
}

/// Mean over `(t, i, j)` of the per-position score; `z` is slice-major
/// `[T, M, H, W, d]`, the result is `[M]`.
pub(crate) fn pool_vars(tape: &mut Tape, z: Var, h: &HeadVars) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    let (t, m) = (s[0], s[1]);
    let scores = linear(tape, z, h.weight, Some(h.bias))?;
    let scores = tape.reshape(scores, &[t, m, s[2] * s[3]])?;
    let per_frame = tape.mean_axis(scores, 2, false)?;
    tape.mean_axis(per_frame, 0, false)
}

pub fn pool_logits(z: &EmbeddedVolume, params: &HeadParams) -> Result<Tensor> {
    let d = z.values.shape()[4];
    if params.weight.shape() != [d, 1] || params.bias.shape() != [1] {
        return Err(SimvaError::shape(format!(
            "head weight {:?} / bias {:?} do not fit d_f = {d}",
            params.weight.shape(),
            params.bias.shape()
        )));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.to_slice_major());
    let h = HeadVars {
        weight: tape.constant(params.weight.clone()),
        bias: tape.constant(params.bias.clone()),
    };
    let y = pool_vars(&mut tape, zv, &h)?;
    Ok(tape.value(y).clone())
}

/// Position of `gt` inside the sampled vocabulary.
pub fn gt_position(vocab: &SampledVocabulary, gt: usize) -> Result<usize> {
    vocab.position(gt).ok_or_else(|| {
        SimvaError::Invariant(format!(
            "ground-truth class {gt} is not in the sampled vocabulary {:?}",
            vocab.indices
        ))
    })
}

fn ce_value(logits: &Tensor, target: usize, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let ce = cross_entropy(&mut tape, l, target, tau)?;
    Ok(tape.value(ce).item())
}

/// Cross-entropy of `softmax(logits / tau_agg)` at the ground truth's
/// position within `vocab`.
pub fn loss_agg(logits: &Tensor, vocab: &SampledVocabulary, gt: usize, tau_agg: f64) -> Result<f64> {
    if logits.len() != vocab.len() {
        return Err(SimvaError::shape(format!(
            "{} logits for a vocabulary of {}",
            logits.len(),
            vocab.len()
        )));
    }
    ce_value(logits, gt_position(vocab, gt)?, tau_agg)
}

/// Cross-entropy of `softmax(S_global / tau_cls)` over every class.
pub fn loss_cls(align: &GlobalAlignment, gt: usize, tau_cls: f64) -> Result<f64> {
    let n = align.prior_scores.len();
    if gt >= n {
        return Err(SimvaError::validation(format!("ground-truth class {gt} out of range for {n} classes")));
    }
    ce_value(&align.prior_scores, gt, tau_cls)
}

pub fn total_loss(
    logits: &Tensor,
    vocab: &SampledVocabulary,
    align: &GlobalAlignment,
    gt: usize,
    params: &HeadParams,
) -> Result<LossReport> {
    let loss_agg = loss_agg(logits, vocab, gt, params.tau_agg)?;
    let loss_cls = loss_cls(align, gt, params.tau_cls)?;
    Ok(LossReport {
        loss_agg,
        loss_cls,
        loss_total: loss_agg + loss_cls,
        logits: logits.clone(),
        global_logits: align.prior_scores.map(|s| s / params.tau_cls),
    })
}
