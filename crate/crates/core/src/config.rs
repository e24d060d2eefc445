//! Model, sampler and training configuration.
//!
//! Field names mirror the config-file keys (`sampler.M`, `sa.window`,
//! `ta.state_dim`, ...). Every struct is `#[serde(default)]` so a config
//! file only needs the keys it changes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SimvaError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    /// Window side; `None` picks [`default_window`] for the grid.
    pub window: Option<usize>,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_rel_pos_bias: bool,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            window: None,
            heads: 4,
            mlp_ratio: 4,
            use_rel_pos_bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub alpha: f64,
    pub enabled: bool,
    /// Standard deviation of the Gaussian weight init for both convolutions.
    pub init_std: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        MotionConfig {
            alpha: 0.5,
            enabled: true,
            init_std: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub state_dim: usize,
    pub expand: usize,
    /// `None` means `ceil(d_f / 16)`.
    pub dt_rank: Option<usize>,
    pub conv_kernel: usize,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            state_dim: 16,
            expand: 2,
            dt_rank: None,
            conv_kernel: 4,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub tau_agg: f64,
    pub tau_cls: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            tau_agg: 1.0,
            tau_cls: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(rename = "M")]
    pub m: usize,
    pub noise_high: f64,
    pub enabled: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            m: 100,
            noise_high: 0.5,
            enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder feature width `D`.
    pub feature_dim: usize,
    pub d_f: usize,
    pub n_layers: usize,
    /// Frames per clip. Informational; the pipeline accepts any `T >= 1`.
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub sa: SpatialConfig,
    pub motion: MotionConfig,
    pub ta: TemporalConfig,
    pub head: HeadConfig,
    pub sampler: SamplerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 512,
            d_f: 64,
            n_layers: 2,
            frames: 16,
            grid_h: 14,
            grid_w: 14,
            sa: SpatialConfig::default(),
            motion: MotionConfig::default(),
            ta: TemporalConfig::default(),
            head: HeadConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Largest divisor of `h` that is at most 7.
pub fn default_window(h: usize) -> usize {
    (1..=h.min(7)).rev().find(|w| h.is_multiple_of(*w)).unwrap_or(1)
}

impl ModelConfig {
    /// The gradient-check configuration: T=4, 4x4 grid, M=5 of 7 classes,
    /// d_f=8, two layers.
    pub fn tiny() -> Self {
        ModelConfig {
            feature_dim: 16,
            d_f: 8,
            n_layers: 2,
            frames: 4,
            grid_h: 4,
            grid_w: 4,
            sa: SpatialConfig {
                heads: 2,
                ..SpatialConfig::default()
            },
            ta: TemporalConfig {
                state_dim: 4,
                ..TemporalConfig::default()
            },
            sampler: SamplerConfig {
                m: 5,
                ..SamplerConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn window(&self) -> usize {
        self.sa.window.unwrap_or_else(|| default_window(self.grid_h))
    }

    pub fn shift(&self) -> usize {
        self.window() / 2
    }

    pub fn inner_dim(&self) -> usize {
        self.ta.expand * self.d_f
    }

    pub fn dt_rank(&self) -> usize {
        self.ta.dt_rank.unwrap_or_else(|| self.d_f.div_ceil(16))
    }

    pub fn mlp_hidden(&self) -> usize {
        self.sa.mlp_ratio * self.d_f
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SimvaError::Validation(m));
        if self.feature_dim == 0 || self.d_f == 0 {
            return err("feature_dim and d_f must be positive".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return err("grid must be non-empty".into());
        }
        let w = self.window();
        if w == 0 || !self.grid_h.is_multiple_of(w) || !self.grid_w.is_multiple_of(w) {
            return err(format!(
                "window {w} must divide the {}x{} grid",
                self.grid_h, self.grid_w
            ));
        }
        if self.sa.heads == 0 || !self.d_f.is_multiple_of(self.sa.heads) {
            return err(format!("sa.heads={} must divide d_f={}", self.sa.heads, self.d_f));
        }
        if self.sa.mlp_ratio == 0 {
            return err("sa.mlp_ratio must be positive".into());
        }
        if !(self.motion.alpha > 0.0) || !(self.motion.init_std >= 0.0) {
            return err("motion.alpha must be > 0 and motion.init_std >= 0".into());
        }
        if self.ta.state_dim == 0 || self.ta.expand == 0 || self.ta.conv_kernel == 0 || self.dt_rank() == 0 {
            return err("ta.state_dim, ta.expand, ta.conv_kernel and ta.dt_rank must be positive".into());
        }
        if !(self.ta.dt_min > 0.0 && self.ta.dt_min <= self.ta.dt_max) {
            return err("need 0 < ta.dt_min <= ta.dt_max".into());
        }
        if !(self.head.tau_agg > 0.0 && self.head.tau_cls > 0.0) {
            return err("head temperatures must be positive".into());
        }
        if self.sampler.m == 0 {
            return err("sampler.M must be at least 1".into());
        }
        if !(self.sampler.noise_high >= 0.0) {
            return err("sampler.noise_high must be non-negative".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the JSON serialization; stamped into checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Protocol {
    ZeroShot,
    FewShot { shots: usize },
    BaseToNovel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate for the aggregator parameters.
    pub lr: f64,
    /// Backbone learning rate. Recorded only: the stub encoder has no
    /// trainable weights.
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Multiplies `epochs`; values below 1 shrink schedules for desk runs.
    pub desk_scale: f64,
    /// Hard cap on optimizer steps, applied after the epoch schedule.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Emit a metrics record every this many steps (and at the last step).
    pub log_every: usize,
    /// Fill `wall_time` in metrics. Disable for byte-reproducible streams.
    pub record_wall_time: bool,
    /// Order each epoch round-robin over classes (each class's clips
    /// shuffled, class order reshuffled every round) instead of a plain
    /// shuffle, so consecutive clips cover the classes evenly.
    pub stratified: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_protocol(Protocol::FewShot { shots: 16 })
    }
}

impl TrainConfig {
    /// Schedule defaults per protocol (AdamW, weight decay 0.01).
    pub fn for_protocol(p: Protocol) -> Self {
        let (lr, epochs, batch_size) = match p {
            Protocol::ZeroShot => (1e-5, 5, 64),
            Protocol::FewShot { .. } => (1e-4, 60, 32),
            Protocol::BaseToNovel => (1e-4, 12, 32),
        };
        TrainConfig {
            lr,
            lr_backbone: 2e-6,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs,
            desk_scale: 1.0,
            max_steps: None,
            batch_size,
            seed: 0,
            log_every: 10,
            record_wall_time: true,
            stratified: false,
        }
    }

    pub fn effective_epochs(&self) -> usize {
        if self.epochs == 0 {
            return 0;
        }
        ((self.epochs as f64 * self.desk_scale).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(SimvaError::validation("batch_size and log_every must be positive"));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.desk_scale > 0.0) {
            return Err(SimvaError::validation("lr, weight_decay must be >= 0 and desk_scale > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_window_picks_largest_divisor() {
        assert_eq!(default_window(14), 7);
        assert_eq!(default_window(4), 4);
        assert_eq!(default_window(16), 4);
        assert_eq!(default_window(11), 1);
    }

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().dt_rank(), 4);
    }

    #[test]
    fn bad_heads_rejected() {
        let mut c = ModelConfig::tiny();
        c.sa.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sampler_key_is_capital_m() {
        let json = serde_json::to_value(SamplerConfig::default()).unwrap();
        assert_eq!(json["M"], 100);
    }
}
