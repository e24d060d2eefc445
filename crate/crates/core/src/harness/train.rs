//! The optimizer loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::eval::top_k_accuracy;
use super::optim::{AdamW, AdamWConfig};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Result, SimvaError};
use crate::model::SimVa;
use crate::params::ParameterStore;
use crate::rng::{derive_seed, rng_from, str_key};

/// One JSON line of the metrics stream. Losses and accuracies are averaged
/// over the clips seen since the previous record; accuracies are percent
/// over the sampled training vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_agg: f64,
    pub loss_cls: f64,
    pub top1: f64,
    pub top5: f64,
    /// Seconds since training started; 0 when wall time is not recorded.
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SimVa,
    pub metrics: Vec<MetricsRecord>,
    pub steps: u64,
}

/// Seed used to initialize parameters for a training seed.
pub fn init_seed(train_seed: u64) -> u64 {
    derive_seed(train_seed, &[str_key("init")])
}

pub fn total_steps(cfg: &TrainConfig, n_clips: usize) -> usize {
    let per_epoch = n_clips.div_ceil(cfg.batch_size);
    let steps = cfg.effective_epochs() * per_epoch;
    cfg.max_steps.map_or(steps, |m| steps.min(m))
}

struct Accum {
    loss_agg: f64,
    loss_cls: f64,
    ranked: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

impl Accum {
    fn new() -> Self {
        Accum {
            loss_agg: 0.0,
            loss_cls: 0.0,
            ranked: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn record(&mut self, step: u64, wall_time: f64) -> MetricsRecord {
        let n = self.labels.len().max(1) as f64;
        let r = MetricsRecord {
            step,
            loss_agg: self.loss_agg / n,
            loss_cls: self.loss_cls / n,
            top1: top_k_accuracy(&self.ranked, &self.labels, 1),
            top5: top_k_accuracy(&self.ranked, &self.labels, 5),
            wall_time,
        };
        *self = Accum::new();
        r
    }
}

/// Clip visiting order for one epoch.
pub fn epoch_order(data: &Dataset, stratified: bool, rng: &mut impl rand::Rng) -> Vec<usize> {
    if !stratified {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        return order;
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels.iter().enumerate() {
        per_class[l].push(i);
    }
    for c in &mut per_class {
        c.shuffle(rng);
    }
    let rounds = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(data.len());
    let mut classes: Vec<usize> = (0..per_class.len()).collect();
    for r in 0..rounds {
        classes.shuffle(rng);
        order.extend(classes.iter().filter_map(|&c| per_class[c].get(r)));
    }
    order
}

/// Train from `init` (or a fresh initialization seeded by `cfg.seed`).
///
/// Data order is a seeded shuffle per epoch and every clip's sampler seed
/// is derived from `(seed, step, clip)`, so `(configs, data)` fully
/// determine the result. Per-clip gradients are computed in parallel and
/// summed in batch order.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    init: Option<ParameterStore>,
    on_metrics: &mut dyn FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SimvaError::validation("training set is empty"));
    }
    let mut model = match init {
        Some(store) => SimVa::from_store(model_cfg.clone(), store)?,
        None => SimVa::init(model_cfg.clone(), init_seed(cfg.seed))?,
    };
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
        &model.params,
    );
    let total = total_steps(cfg, data.len());
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut acc = Accum::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    for step in 0..total as u64 {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = epoch_order(data, cfg.stratified, &mut rng_from(cfg.seed, &[str_key("epoch"), epoch]));
                epoch += 1;
                cursor = 0;
                if !batch.is_empty() {
                    // Batches never straddle epochs.
                    break;
                }
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results = batch
            .par_iter()
            .map(|&i| {
                let seed = derive_seed(cfg.seed, &[str_key("sampler"), step, i as u64]);
                let vocab = model.train_vocabulary(&data.clips[i], &data.texts, data.labels[i], seed)?;
                let (report, grads) = model
                    .loss_and_grad(&data.clips[i], &data.texts, &vocab, data.labels[i])
                    .map_err(|e| match e {
                        SimvaError::NonFinite(what) => {
                            SimvaError::NonFinite(format!("{what} at step {step} on clip {}", data.clips[i].clip_id))
                        }
                        e => e,
                    })?;
                let mut ranked: Vec<usize> = (0..vocab.len()).collect();
                let l = report.logits.data();
                ranked.sort_by(|&a, &b| l[b].total_cmp(&l[a]).then(a.cmp(&b)));
                let ranked = ranked.into_iter().map(|p| vocab.indices[p]).collect::<Vec<_>>();
                Ok((report, grads, ranked))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut sum = model.params.zeros_like();
        let scale = 1.0 / results.len() as f64;
        for ((report, grads, ranked), &i) in results.into_iter().zip(&batch) {
            for (name, g) in grads.iter() {
                let dst = sum.values_mut(name)?;
                for (d, x) in dst.iter_mut().zip(g.tensor.data()) {
                    *d += x * scale;
                }
            }
            acc.loss_agg += report.loss_agg;
            acc.loss_cls += report.loss_cls;
            acc.ranked.push(ranked);
            acc.labels.push(data.labels[i]);
        }
        if let Err(name) = sum.all_finite() {
            return Err(SimvaError::NonFinite(format!("gradient of {name} at step {step}")));
        }
        opt.step(&mut model.params, &sum)?;
        if let Err(name) = model.params.all_finite() {
            return Err(SimvaError::NonFinite(format!("parameter {name} after step {step}")));
        }
        let done = step + 1;
        if done % cfg.log_every as u64 == 0 || done == total as u64 {
            let wall = if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
            let r = acc.record(done, wall);
            on_metrics(&r);
            metrics.push(r);
        }
    }
    model.params.metadata.step = opt.steps_taken();
    Ok(TrainOutcome {
        model,
        metrics,
        steps: opt.steps_taken(),
    })
}
