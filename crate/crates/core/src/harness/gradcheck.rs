//! Central-difference check of analytic parameter gradients.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Result, SimvaError};
use crate::features::{encode_text_stub, EncodedVideo, TextEmbeddingSet};
use crate::model::SimVa;
use crate::params::ParameterStore;
use crate::rng::{normal_tensor, rng_from, str_key};
use crate::sampler::SampledVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Scalars checked per array; arrays at most this large are checked in
    /// full.
    pub samples_per_array: usize,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are compared absolutely at this scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_array: 64,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub arrays: Vec<ArrayCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.arrays.iter().all(|a| a.passed)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.arrays.iter().filter(|a| !a.passed).map(|a| a.name.as_str()).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.arrays.iter().map(|a| a.max_rel_err).fold(0.0, f64::max)
    }

    /// `Ok` when every array passes, else a validation error listing the
    /// failing arrays.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(SimvaError::validation(format!(
                "gradient check failed (tolerance {:e}) for: {}",
                self.options.tolerance,
                self.failing().join(", ")
            )))
        }
    }
}

/// Compare `grad(params)` against central differences of the loss on a
/// sample of entries of every array. `loss` returns the loss as a list of
/// terms; each term is differenced on its own and the results summed, which
/// keeps round-off of large constant terms out of the estimate.
pub fn gradcheck_fn(
    params: &ParameterStore,
    loss: impl Fn(&ParameterStore) -> Result<Vec<f64>> + Sync,
    grad: impl Fn(&ParameterStore) -> Result<ParameterStore>,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let analytic = grad(params)?;
    let mut arrays = Vec::new();
    for (name, arr) in params.iter() {
        let n = arr.tensor.len();
        let picks: Vec<usize> = if n <= opts.samples_per_array {
            (0..n).collect()
        } else {
            let mut rng = rng_from(opts.seed, &[str_key("gradcheck"), str_key(name)]);
            let mut v = sample(&mut rng, n, opts.samples_per_array).into_vec();
            v.sort_unstable();
            v
        };
        let g = analytic.get(name)?.data();
        let errs = picks
            .par_iter()
            .map(|&k| {
                let at = |delta: f64| {
                    let mut p = params.clone();
                    p.values_mut(name)?[k] += delta;
                    loss(&p)
                };
                let (plus, minus) = (at(opts.eps)?, at(-opts.eps)?);
                let numeric: f64 = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * opts.eps)).sum();
                let abs = (g[k] - numeric).abs();
                Ok((abs / g[k].abs().max(numeric.abs()).max(opts.floor), abs))
            })
            .collect::<Result<Vec<_>>>()?;
        let max_rel_err = errs.iter().map(|e| e.0).fold(0.0, f64::max);
        arrays.push(ArrayCheck {
            name: name.to_string(),
            checked: picks.len(),
            max_rel_err,
            max_abs_err: errs.iter().map(|e| e.1).fold(0.0, f64::max),
            passed: max_rel_err <= opts.tolerance,
        });
    }
    Ok(GradcheckReport { options: opts, arrays })
}

/// Check the full training loss of `model` on one clip with a fixed
/// vocabulary.
pub fn gradcheck_model(
    model: &SimVa,
    video: &EncodedVideo,
    texts: &TextEmbeddingSet,
    vocab: &SampledVocabulary,
    gt: usize,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let with = |p: &ParameterStore| SimVa {
        config: model.config.clone(),
        params: p.clone(),
    };
    gradcheck_fn(
        &model.params,
        |p| {
            let r = with(p).loss_on_vocab(video, texts, vocab, gt)?;
            Ok(vec![r.loss_agg, r.loss_cls])
        },
        |p| Ok(with(p).loss_and_grad(video, texts, vocab, gt)?.1),
        opts,
    )
}

/// A seeded random clip and vocabulary sized for `cfg`, plus a training
/// vocabulary for ground truth 0.
pub struct Problem {
    pub model: SimVa,
    pub video: EncodedVideo,
    pub texts: TextEmbeddingSet,
    pub vocab: SampledVocabulary,
    pub gt: usize,
}

pub fn random_problem(cfg: &ModelConfig, n_classes: usize, seed: u64) -> Result<Problem> {
    let model = SimVa::init(cfg.clone(), seed)?;
    let mut rng = rng_from(seed, &[str_key("gradcheck-input")]);
    let video = EncodedVideo::new(
        normal_tensor(&mut rng, &[cfg.frames, cfg.grid_h, cfg.grid_w, cfg.feature_dim], 1.0),
        normal_tensor(&mut rng, &[cfg.frames, cfg.feature_dim], 1.0),
        "gradcheck",
    )?;
    let names: Vec<String> = (0..n_classes).map(|c| format!("class {c}")).collect();
    let texts = encode_text_stub(&names, cfg.feature_dim, seed)?;
    let gt = 0;
    let vocab = model.train_vocabulary(&video, &texts, gt, seed)?;
    Ok(Problem {
        model,
        video,
        texts,
        vocab,
        gt,
    })
}

pub fn gradcheck(cfg: &ModelConfig, n_classes: usize, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let p = random_problem(cfg, n_classes, opts.seed)?;
    gradcheck_model(&p.model, &p.video, &p.texts, &p.vocab, p.gt, opts)
}
