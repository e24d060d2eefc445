//! The full stack: sampling, similarity volume, `N_L` layers of spatial
//! aggregation, motion modulation and temporal scanning, then the pooled
//! head.
//!
//! Parameter names:
//!
//! ```text
//! embed.conv.kernel, embed.conv.bias
//! layers.{l}.sa.blocks.{0,1}.{norm1,attn.qkv,attn.proj,norm2,mlp.fc1,mlp.fc2}.{weight,bias}
//! layers.{l}.sa.blocks.{0,1}.attn.rel_pos_bias
//! layers.{l}.motion.{psi,phi}.{weight,bias}
//! layers.{l}.ta.{norm.weight, in_proj.weight, conv1d.weight, conv1d.bias, x_proj.weight,
//!                dt_proj.weight, dt_proj.bias, A_log, D, out_proj.weight}
//! head.linear.weight, head.linear.bias
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Result, SimvaError};
use crate::features::{EncodedVideo, TextEmbeddingSet};
use crate::head::{gt_position, pool_vars, HeadParams, HeadVars, LossReport};
use crate::motion::{modulate_vars, motion_vars, MotionModulatorParams, MotionVars};
use crate::nn::cross_entropy;
use crate::params::{BoundParams, ParameterStore};
use crate::rng::rng_from;
use crate::sampler::{global_alignment, global_alignment_vars, sample_classes_with_noise, GlobalAlignment, SampledVocabulary};
use crate::similarity::{cosine_volume, embed_vars, EMBED_KERNEL};
use crate::spatial::{spatial_vars, BlockGeometry, BlockVars, WindowAttentionBlockParams};
use crate::temporal::{temporal_vars, ScanDims, SelectiveScanParams, TemporalVars};
use crate::tensor::Tensor;

/// Analytic parameter counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub embed: usize,
    /// One spatial stage (both blocks).
    pub spatial_per_layer: usize,
    pub motion_per_layer: usize,
    pub temporal_per_layer: usize,
    pub head: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn per_layer(&self) -> usize {
        self.spatial_per_layer + self.motion_per_layer + self.temporal_per_layer
    }
}

fn scan_dims(cfg: &ModelConfig) -> ScanDims {
    ScanDims {
        d_f: cfg.d_f,
        inner: cfg.inner_dim(),
        state: cfg.ta.state_dim,
        dt_rank: cfg.dt_rank(),
        conv_kernel: cfg.ta.conv_kernel,
    }
}

fn block_geometry(cfg: &ModelConfig, b: usize) -> BlockGeometry {
    BlockGeometry {
        window: cfg.window(),
        heads: cfg.sa.heads,
        shift: if b == 0 { 0 } else { cfg.shift() },
    }
}

pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d_f;
    let embed = EMBED_KERNEL * EMBED_KERNEL * d + d;
    let spatial = 2 * WindowAttentionBlockParams::count(d, cfg.mlp_hidden(), cfg.window(), cfg.sa.heads, cfg.sa.use_rel_pos_bias);
    let motion = if cfg.motion.enabled {
        MotionModulatorParams::count(cfg.feature_dim, d)
    } else {
        0
    };
    let temporal = SelectiveScanParams::count(scan_dims(cfg));
    let head = HeadParams::count(d);
    ParamCount {
        embed,
        spatial_per_layer: spatial,
        motion_per_layer: motion,
        temporal_per_layer: temporal,
        head,
        total: embed + cfg.n_layers * (spatial + motion + temporal) + head,
    }
}

/// Eval-mode output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub vocab: SampledVocabulary,
    /// Pooled scores over `vocab`.
    pub logits: Tensor,
    /// Scores over every class; classes outside `vocab` get `-inf`.
    pub scores: Tensor,
}

impl Prediction {
    /// Class indices of the `k` best scores, best first; ties go to the
    /// lower index. Never returns classes outside the sampled vocabulary.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = self.vocab.indices.clone();
        let s = self.scores.data();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    }
}

/// Intermediate arrays of one forward pass, in the public layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// `T x H x W x M` cosines.
    pub similarity: Tensor,
    /// Per layer, `(T-1) x H x W x d_f` gains (empty when motion is off).
    pub gains: Vec<Tensor>,
    /// `(name, T x H x W x M x d_f)` after each stage: `Z_0`, then
    /// `layers.{l}.Z_sa`, `layers.{l}.Z_mod` (motion on) and `layers.{l}.Z_ta`.
    pub stages: Vec<(String, Tensor)>,
    pub logits: Tensor,
}

/// Model configuration plus its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SimVa {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

struct LayerVars {
    blocks: Vec<BlockVars>,
    motion: Option<MotionVars>,
    temporal: TemporalVars,
}

struct ModelVars {
    embed: (Var, Var),
    layers: Vec<LayerVars>,
    head: HeadVars,
}

fn public_layout(t: &Tensor) -> Tensor {
    t.permute(&[0, 2, 3, 1, 4])
}

impl SimVa {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let d = cfg.d_f;
        let mut store = ParameterStore::new();
        let mut rng = rng_from(seed, &[0]);
        let bound = 1.0 / EMBED_KERNEL as f64;
        let uni = |shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
        };
        store.insert("embed.conv.kernel", uni(&[EMBED_KERNEL, EMBED_KERNEL, 1, d], &mut rng))?;
        store.insert("embed.conv.bias", uni(&[d], &mut rng))?;
        for l in 0..cfg.n_layers {
            let mut rng = rng_from(seed, &[1, l as u64]);
            for b in 0..2 {
                WindowAttentionBlockParams::init(&mut rng, d, cfg.mlp_hidden(), block_geometry(cfg, b), cfg.sa.use_rel_pos_bias)
                    .write_to(&mut store, &format!("layers.{l}.sa.blocks.{b}."))?;
            }
            if cfg.motion.enabled {
                MotionModulatorParams::init(&mut rng, cfg.feature_dim, d, cfg.motion.init_std, cfg.motion.alpha)
                    .write_to(&mut store, &format!("layers.{l}.motion."))?;
            }
            SelectiveScanParams::init(&mut rng, scan_dims(cfg), cfg.ta.dt_min, cfg.ta.dt_max)
                .write_to(&mut store, &format!("layers.{l}.ta."))?;
        }
        HeadParams::init(&mut rng_from(seed, &[2]), d, cfg.head.tau_agg, cfg.head.tau_cls).write_to(&mut store, "head.")?;
        store.metadata.config_hash = Some(config.hash());
        Ok(SimVa { config, params: store })
    }

    /// Wrap an existing store, checking it has exactly the layout `config`
    /// implies.
    pub fn from_store(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        let fresh = SimVa::init(config.clone(), 0)?;
        let diff = fresh.params.structural_diff(&params);
        if !diff.is_empty() {
            return Err(SimvaError::Structural { keys: diff });
        }
        Ok(SimVa { config, params })
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(&self.config)
    }

    fn bind(&self, tape: &mut Tape) -> Result<ModelVars> {
        let bp = self.params.bind(tape);
        self.bind_with(&bp)
    }

    fn check_inputs(&self, video: &EncodedVideo, texts: &TextEmbeddingSet) -> Result<()> {
        if video.dim() != self.config.feature_dim || texts.dim() != self.config.feature_dim {
            return Err(SimvaError::shape(format!(
                "model expects feature dim {}, got video {} and text {}",
                self.config.feature_dim,
                video.dim(),
                texts.dim()
            )));
        }
        Ok(())
    }

    /// Candidate vocabulary for a clip: top-M sampling when the sampler is
    /// enabled, otherwise every class.
    pub fn vocabulary(
        &self,
        align: &GlobalAlignment,
        texts: &TextEmbeddingSet,
        gt: Option<usize>,
        training: bool,
        seed: u64,
    ) -> Result<SampledVocabulary> {
        let s = &self.config.sampler;
        if s.enabled {
            sample_classes_with_noise(align, texts, s.m, training, gt, seed, s.noise_high)
        } else {
            SampledVocabulary::full(texts, if training { gt } else { None })
        }
    }

    /// Training-mode vocabulary for one clip: noisy top-M with the ground
    /// truth forced in.
    pub fn train_vocabulary(&self, video: &EncodedVideo, texts: &TextEmbeddingSet, gt: usize, seed: u64) -> Result<SampledVocabulary> {
        let align = global_alignment(video, texts)?;
        self.vocabulary(&align, texts, Some(gt), true, seed)
    }

    /// Pooled logits over `vocab` as a tape node. With `trace`, stage
    /// outputs are recorded along the way.
    fn logits_var(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        video: &EncodedVideo,
        vocab: &SampledVocabulary,
        mut trace: Option<&mut Trace>,
    ) -> Result<Var> {
        let f = tape.constant(video.patch_features.clone());
        let txt = tape.constant(vocab.restricted_embeddings.clone());
        let s = cosine_volume(tape, f, txt)?;
        let mut z = embed_vars(tape, s, vars.embed.0, vars.embed.1)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.similarity = tape.value(s).clone();
            tr.stages.push(("Z_0".into(), public_layout(tape.value(z))));
        }
        for (l, layer) in vars.layers.iter().enumerate() {
            z = spatial_vars(tape, z, &layer.blocks)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.stages.push((format!("layers.{l}.Z_sa"), public_layout(tape.value(z))));
            }
            if let Some(mv) = &layer.motion {
                if let Some(out) = motion_vars(tape, f, mv)? {
                    z = modulate_vars(tape, z, out.gain)?;
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.gains.push(tape.value(out.gain).clone());
                        tr.stages.push((format!("layers.{l}.Z_mod"), public_layout(tape.value(z))));
                    }
                }
            }
            z = temporal_vars(tape, z, &layer.temporal)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.stages.push((format!("layers.{l}.Z_ta"), public_layout(tape.value(z))));
            }
        }
        pool_vars(tape, z, &vars.head)
    }

    /// Build the loss graph for one clip. Returns `(loss, agg, cls, logits)`.
    fn loss_graph(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        video: &EncodedVideo,
        texts: &TextEmbeddingSet,
        vocab: &SampledVocabulary,
        gt: usize,
    ) -> Result<[Var; 4]> {
        let logits = self.logits_var(tape, vars, video, vocab, None)?;
        let agg = cross_entropy(tape, logits, gt_position(vocab, gt)?, self.config.head.tau_agg)?;
        let cls_tokens = tape.constant(video.cls_tokens.clone());
        let all = tape.constant(texts.embeddings.clone());
        let (_, prior) = global_alignment_vars(tape, cls_tokens, all)?;
        let cls = cross_entropy(tape, prior, gt, self.config.head.tau_cls)?;
        let total = tape.add(agg, cls)?;
        Ok([total, agg, cls, logits])
    }

    fn report(&self, tape: &Tape, v: [Var; 4], align: &GlobalAlignment) -> LossReport {
        LossReport {
            loss_total: tape.value(v[0]).item(),
            loss_agg: tape.value(v[1]).item(),
            loss_cls: tape.value(v[2]).item(),
            logits: tape.value(v[3]).clone(),
            global_logits: align.prior_scores.map(|s| s / self.config.head.tau_cls),
        }
    }

    /// Training-mode forward: sampled vocabulary (with noise, ground truth
    /// forced in) and both loss terms.
    pub fn forward_train(&self, video: &EncodedVideo, texts: &TextEmbeddingSet, gt: usize, seed: u64) -> Result<LossReport> {
        self.forward_train_with_vocab(video, texts, gt, seed).map(|(r, _)| r)
    }

    pub fn forward_train_with_vocab(
        &self,
        video: &EncodedVideo,
        texts: &TextEmbeddingSet,
        gt: usize,
        seed: u64,
    ) -> Result<(LossReport, SampledVocabulary)> {
        self.check_inputs(video, texts)?;
        let vocab = self.train_vocabulary(video, texts, gt, seed)?;
        let align = global_alignment(video, texts)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let v = self.loss_graph(&mut tape, &vars, video, texts, &vocab, gt)?;
        Ok((self.report(&tape, v, &align), vocab))
    }

    /// Loss on a fixed vocabulary. Used by the gradient checker so every
    /// perturbed evaluation sees the same candidate set.
    pub fn loss_on_vocab(
        &self,
        video: &EncodedVideo,
        texts: &TextEmbeddingSet,
        vocab: &SampledVocabulary,
        gt: usize,
    ) -> Result<LossReport> {
        self.check_inputs(video, texts)?;
        let align = global_alignment(video, texts)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let v = self.loss_graph(&mut tape, &vars, video, texts, vocab, gt)?;
        Ok(self.report(&tape, v, &align))
    }

    /// Loss report and the gradient of `L_agg + L_cls` for every parameter.
    pub fn loss_and_grad(
        &self,
        video: &EncodedVideo,
        texts: &TextEmbeddingSet,
        vocab: &SampledVocabulary,
        gt: usize,
    ) -> Result<(LossReport, ParameterStore)> {
        self.check_inputs(video, texts)?;
        let align = global_alignment(video, texts)?;
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape);
        let vars = self.bind_with(&bp)?;
        let v = self.loss_graph(&mut tape, &vars, video, texts, vocab, gt)?;
        let report = self.report(&tape, v, &align);
        if !report.loss_total.is_finite() {
            return Err(SimvaError::NonFinite(first_non_finite(&tape, v)));
        }
        let mut grads = tape.backward(v[0])?;
        Ok((report, bp.gradients(&mut grads, &self.params)))
    }

    fn bind_with(&self, bp: &BoundParams) -> Result<ModelVars> {
        let cfg = &self.config;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                Ok(LayerVars {
                    blocks: (0..2)
                        .map(|b| BlockVars::from_bound(bp, &format!("layers.{l}.sa.blocks.{b}."), block_geometry(cfg, b)))
                        .collect::<Result<Vec<_>>>()?,
                    motion: cfg
                        .motion
                        .enabled
                        .then(|| MotionVars::from_bound(bp, &format!("layers.{l}.motion."), cfg.motion.alpha))
                        .transpose()?,
                    temporal: TemporalVars::from_bound(bp, &format!("layers.{l}.ta."))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars {
            embed: (bp.get("embed.conv.kernel")?, bp.get("embed.conv.bias")?),
            layers,
            head: HeadVars::from_bound(bp, "head.")?,
        })
    }

    /// Eval-mode forward: noise-free top-M vocabulary, pooled logits, and
    /// full-vocabulary scores with `-inf` outside the sampled set.
    pub fn predict(&self, video: &EncodedVideo, texts: &TextEmbeddingSet) -> Result<Prediction> {
        self.check_inputs(video, texts)?;
        let align = global_alignment(video, texts)?;
        let vocab = self.vocabulary(&align, texts, None, false, 0)?;
        self.predict_on_vocab(video, texts, vocab)
    }

    pub fn predict_on_vocab(&self, video: &EncodedVideo, texts: &TextEmbeddingSet, vocab: SampledVocabulary) -> Result<Prediction> {
        self.check_inputs(video, texts)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let logits = self.logits_var(&mut tape, &vars, video, &vocab, None)?;
        let logits = tape.value(logits).clone();
        let mut scores = Tensor::full([texts.num_classes()], f64::NEG_INFINITY);
        for (k, &c) in vocab.indices.iter().enumerate() {
            scores.data_mut()[c] = logits.data()[k];
        }
        Ok(Prediction { vocab, logits, scores })
    }

    /// Eval-mode forward that also records every intermediate volume.
    pub fn trace(&self, video: &EncodedVideo, texts: &TextEmbeddingSet) -> Result<(Prediction, Trace)> {
        self.check_inputs(video, texts)?;
        let align = global_alignment(video, texts)?;
        let vocab = self.vocabulary(&align, texts, None, false, 0)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let mut tr = Trace {
            similarity: Tensor::zeros([0]),
            gains: Vec::new(),
            stages: Vec::new(),
            logits: Tensor::zeros([0]),
        };
        let logits = self.logits_var(&mut tape, &vars, video, &vocab, Some(&mut tr))?;
        tr.logits = tape.value(logits).clone();
        let pred = self.predict_on_vocab(video, texts, vocab)?;
        Ok((pred, tr))
    }
}

/// Name of the first tape stage whose value is not finite.
fn first_non_finite(tape: &Tape, v: [Var; 4]) -> String {
    let names = ["loss_total", "loss_agg", "loss_cls", "logits"];
    for (name, var) in names.iter().zip(v).rev() {
        if !tape.value(var).all_finite() {
            return (*name).to_string();
        }
    }
    "loss_total".into()
}
