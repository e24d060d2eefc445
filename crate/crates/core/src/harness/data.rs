//! Labelled clip collections and the protocol splits built from them.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimvaError};
use crate::features::{encode_text_stub, encode_video_stub, make_synthetic_dataset, EncodedVideo, SyntheticDatasetSpec, TextEmbeddingSet};
use crate::rng::{rng_from, str_key};
use crate::tensor::Tensor;

/// Encoded clips, their labels and the class vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clips: Vec<EncodedVideo>,
    pub labels: Vec<usize>,
    pub texts: TextEmbeddingSet,
}

/// How synthetic clips are turned into features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub spec: SyntheticDatasetSpec,
    pub feature_dim: usize,
    pub encoder_seed: u64,
    /// Clips per class held out for testing (taken from the end of each
    /// class's clip list).
    pub test_per_class: usize,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource {
            spec: SyntheticDatasetSpec::default(),
            feature_dim: 32,
            encoder_seed: 0,
            test_per_class: 4,
        }
    }
}

impl Dataset {
    pub fn new(clips: Vec<EncodedVideo>, labels: Vec<usize>, texts: TextEmbeddingSet) -> Result<Self> {
        if clips.len() != labels.len() {
            return Err(SimvaError::validation(format!("{} clips but {} labels", clips.len(), labels.len())));
        }
        let n = texts.num_classes();
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n) {
            return Err(SimvaError::validation(format!(
                "clip {} has label {l} outside the {n}-class vocabulary",
                clips[i].clip_id
            )));
        }
        Ok(Dataset { clips, labels, texts })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.texts.num_classes()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            texts: self.texts.clone(),
        }
    }

    /// Clips of the given classes with the vocabulary restricted to them;
    /// labels are renumbered to positions in `classes`.
    pub fn restrict_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let texts = self.texts.select(classes)?;
        let mut clips = Vec::new();
        let mut labels = Vec::new();
        for (clip, &l) in self.clips.iter().zip(&self.labels) {
            if let Some(p) = classes.iter().position(|&c| c == l) {
                clips.push(clip.clone());
                labels.push(p);
            }
        }
        Dataset::new(clips, labels, texts)
    }

    /// Exactly `k` clips per class, chosen by a seeded shuffle of each
    /// class's clips; output keeps the original clip order.
    pub fn few_shot(&self, k: usize, seed: u64) -> Result<Dataset> {
        let mut keep = Vec::new();
        for c in 0..self.num_classes() {
            let mut of_class: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if of_class.len() < k {
                return Err(SimvaError::validation(format!(
                    "{k}-shot subset needs {k} clips of class {c} but only {} are available",
                    of_class.len()
                )));
            }
            of_class.shuffle(&mut rng_from(seed, &[str_key("few-shot"), c as u64]));
            keep.extend_from_slice(&of_class[..k]);
        }
        keep.sort_unstable();
        Ok(self.subset(&keep))
    }

    /// Every clip with its frames put in a seeded random order (never the
    /// identity when a clip has two or more frames).
    pub fn frame_shuffled(&self, seed: u64) -> Dataset {
        let clips = self
            .clips
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let t = v.frames();
                let mut order: Vec<usize> = (0..t).collect();
                let mut rng = rng_from(seed, &[str_key("frame-shuffle"), i as u64]);
                while t > 1 && order.iter().enumerate().all(|(a, &b)| a == b) {
                    order.shuffle(&mut rng);
                }
                reorder_frames(v, &order)
            })
            .collect();
        Dataset {
            clips,
            labels: self.labels.clone(),
            texts: self.texts.clone(),
        }
    }

    /// Render and encode a synthetic dataset, returning `(train, test)`.
    pub fn synthetic(src: &SyntheticSource) -> Result<(Dataset, Dataset)> {
        let spec = &src.spec;
        if src.test_per_class >= spec.clips_per_class {
            return Err(SimvaError::validation(format!(
                "test_per_class ({}) must be smaller than clips_per_class ({})",
                src.test_per_class, spec.clips_per_class
            )));
        }
        let raw = make_synthetic_dataset(spec)?;
        let texts = encode_text_stub(&spec.class_names(), src.feature_dim, src.encoder_seed)?;
        let encoded = raw
            .par_iter()
            .map(|c| encode_video_stub(c, src.feature_dim, spec.patch, src.encoder_seed))
            .collect::<Result<Vec<_>>>()?;
        let n_train = spec.clips_per_class - src.test_per_class;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, (clip, v)) in raw.iter().zip(encoded).enumerate() {
            let label = clip.label.expect("synthetic clips are labelled");
            let dst = if i % spec.clips_per_class < n_train { &mut train } else { &mut test };
            dst.push((v, label));
        }
        let build = |items: Vec<(EncodedVideo, usize)>| {
            let (clips, labels) = items.into_iter().unzip();
            Dataset::new(clips, labels, texts.clone())
        };
        Ok((build(train)?, build(test)?))
    }
}

fn reorder_frames(v: &EncodedVideo, order: &[usize]) -> EncodedVideo {
    let pick = |t: &Tensor| {
        let per = t.len() / t.shape()[0];
        let mut data = Vec::with_capacity(t.len());
        for &o in order {
            data.extend_from_slice(&t.data()[o * per..(o + 1) * per]);
        }
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    };
    EncodedVideo {
        patch_features: pick(&v.patch_features),
        cls_tokens: pick(&v.cls_tokens),
        clip_id: v.clip_id.clone(),
    }
}

/// Classes `0..n/2` are base, the rest novel.
pub fn base_novel_classes(n_classes: usize) -> (Vec<usize>, Vec<usize>) {
    let half = n_classes / 2;
    ((0..half).collect(), (half..n_classes).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSource {
        SyntheticSource {
            spec: SyntheticDatasetSpec {
                n_classes: 4,
                clips_per_class: 5,
                frames: 3,
                height: 16,
                width: 16,
                patch: 4,
                ..Default::default()
            },
            feature_dim: 6,
            encoder_seed: 1,
            test_per_class: 2,
        }
    }

    #[test]
    fn synthetic_split_sizes() {
        let (train, test) = Dataset::synthetic(&small()).unwrap();
        assert_eq!((train.len(), test.len()), (12, 8));
        assert_eq!(train.labels[..3], [0, 0, 0]);
        assert_eq!(test.labels[..2], [0, 0]);
    }

    #[test]
    fn few_shot_counts_and_errors() {
        let (train, _) = Dataset::synthetic(&small()).unwrap();
        let fs = train.few_shot(2, 7).unwrap();
        for c in 0..4 {
            assert_eq!(fs.labels.iter().filter(|&&l| l == c).count(), 2);
        }
        assert_eq!(fs, train.few_shot(2, 7).unwrap());
        assert!(matches!(train.few_shot(4, 7), Err(SimvaError::Validation(_))));
    }

    #[test]
    fn frame_shuffle_permutes_frames() {
        let (train, _) = Dataset::synthetic(&small()).unwrap();
        let sh = train.frame_shuffled(3);
        for (a, b) in train.clips.iter().zip(&sh.clips) {
            assert_ne!(a.patch_features, b.patch_features);
            let mut x = a.patch_features.data().to_vec();
            let mut y = b.patch_features.data().to_vec();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn restrict_renumbers_labels() {
        let (train, _) = Dataset::synthetic(&small()).unwrap();
        let r = train.restrict_classes(&[3, 1]).unwrap();
        assert_eq!(r.num_classes(), 2);
        assert_eq!(r.len(), 6);
        assert!(r.labels.iter().all(|&l| l < 2));
        assert_eq!(r.texts.class_names[0], train.texts.class_names[3]);
    }
}
