//! Accuracy metrics and the evaluation protocols.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{base_novel_classes, Dataset};
use super::train::{train, MetricsRecord, TrainOutcome};
use crate::config::{ModelConfig, Protocol, TrainConfig};
use crate::error::Result;
use crate::model::SimVa;

/// Top-1 / top-5 accuracy in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
}

/// Percentage of rows whose label is among the `k` best-ranked classes.
/// `ranked[i]` lists class indices best first.
pub fn top_k_accuracy(ranked: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .zip(labels)
        .filter(|(r, l)| r.iter().take(k).any(|c| c == *l))
        .count();
    100.0 * hits as f64 / labels.len() as f64
}

pub fn accuracy(ranked: &[Vec<usize>], labels: &[usize]) -> Accuracy {
    Accuracy {
        top1: top_k_accuracy(ranked, labels, 1),
        top5: top_k_accuracy(ranked, labels, 5),
        n: labels.len(),
    }
}

/// `2 b n / (b + n)`; zero when both are zero.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base + novel == 0.0 {
        return 0.0;
    }
    2.0 * base * novel / (base + novel)
}

/// Eval-mode predictions for every clip, ranked best first. Clips run in
/// parallel; results keep dataset order.
pub fn rank_all(model: &SimVa, data: &Dataset) -> Result<Vec<Vec<usize>>> {
    data.clips
        .par_iter()
        .map(|v| model.predict(v, &data.texts).map(|p| p.top_k(data.num_classes())))
        .collect()
}

pub fn evaluate(model: &SimVa, data: &Dataset) -> Result<Accuracy> {
    Ok(accuracy(&rank_all(model, data)?, &data.labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseToNovel {
    pub base: Accuracy,
    pub novel: Accuracy,
    /// Harmonic mean of the two top-1 accuracies.
    pub hm: f64,
}

/// Base classes evaluated against the base vocabulary, novel classes
/// against the novel vocabulary.
pub fn evaluate_base_to_novel(model: &SimVa, test: &Dataset) -> Result<BaseToNovel> {
    let (base, novel) = base_novel_classes(test.num_classes());
    let b = evaluate(model, &test.restrict_classes(&base)?)?;
    let n = evaluate(model, &test.restrict_classes(&novel)?)?;
    Ok(BaseToNovel {
        base: b,
        novel: n,
        hm: harmonic_mean(b.top1, n.top1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum ProtocolReport {
    ZeroShot { test: Accuracy },
    FewShot { shots: usize, selection_seed: u64, test: Accuracy },
    BaseToNovel { result: BaseToNovel },
}

/// Train under `protocol` and evaluate on `test`.
///
/// * zero-shot: train on every training clip, test on `test`.
/// * few-shot(K): train on K clips per class picked with the training seed.
/// * base-to-novel: train on the base half of the classes only, then
///   report base, novel and their harmonic mean.
pub fn run_protocol(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    protocol: Protocol,
    train_data: &Dataset,
    test: &Dataset,
    on_metrics: &mut dyn FnMut(&MetricsRecord),
) -> Result<(TrainOutcome, ProtocolReport)> {
    match protocol {
        Protocol::ZeroShot => {
            let out = train(model_cfg, train_cfg, train_data, None, on_metrics)?;
            let test = evaluate(&out.model, test)?;
            Ok((out, ProtocolReport::ZeroShot { test }))
        }
        Protocol::FewShot { shots } => {
            let subset = train_data.few_shot(shots, train_cfg.seed)?;
            let out = train(model_cfg, train_cfg, &subset, None, on_metrics)?;
            let acc = evaluate(&out.model, test)?;
            Ok((
                out,
                ProtocolReport::FewShot {
                    shots,
                    selection_seed: train_cfg.seed,
                    test: acc,
                },
            ))
        }
        Protocol::BaseToNovel => {
            let (base, _) = base_novel_classes(train_data.num_classes());
            let out = train(model_cfg, train_cfg, &train_data.restrict_classes(&base)?, None, on_metrics)?;
            let result = evaluate_base_to_novel(&out.model, test)?;
            Ok((out, ProtocolReport::BaseToNovel { result }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking_is_full_marks() {
        let r = vec![vec![2, 0, 1], vec![0, 1, 2]];
        let a = accuracy(&r, &[2, 0]);
        assert_eq!((a.top1, a.top5), (100.0, 100.0));
    }

    #[test]
    fn top5_counts_lower_ranks() {
        let r = vec![(0..8).collect::<Vec<_>>(), (0..8).collect()];
        let a = accuracy(&r, &[4, 5]);
        assert_eq!((a.top1, a.top5), (0.0, 50.0));
    }

    #[test]
    fn harmonic_mean_identities() {
        assert_eq!(harmonic_mean(40.0, 40.0), 40.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(95.5, 82.0) - 88.2).abs() < 0.05);
    }
}
