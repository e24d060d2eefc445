//! Training, evaluation, gradient checking and inspection on top of the
//! model, plus the run configuration the command-line tool reads.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod inspect;
pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Protocol, TrainConfig};
use crate::error::Result;

pub use data::{Dataset, SyntheticSource};
pub use eval::{evaluate, harmonic_mean, Accuracy};
pub use gradcheck::{GradcheckOptions, GradcheckReport};
pub use train::{train, MetricsRecord, TrainOutcome};

/// Everything a run needs, as one structured document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSource,
    pub protocol: ProtocolChoice,
    pub gradcheck: GradcheckSection,
}

/// Protocol selection with a default, for config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProtocolChoice(pub Protocol);

impl Default for ProtocolChoice {
    fn default() -> Self {
        ProtocolChoice(Protocol::ZeroShot)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(flatten)]
    pub options: GradcheckOptions,
    pub n_classes: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            options: GradcheckOptions::default(),
            n_classes: 7,
        }
    }
}

impl RunConfig {
    /// The desk-scale motion benchmark: eight king-move classes, 8 train and
    /// 4 test clips per class, T = 8 on a 4x4 grid, d_f = 16, no class
    /// sampling, at most 500 optimizer steps.
    pub fn desk() -> Self {
        let mut model = ModelConfig {
            feature_dim: 8,
            d_f: 16,
            frames: 8,
            grid_h: 4,
            grid_w: 4,
            ..ModelConfig::default()
        };
        model.sa.heads = 2;
        model.ta.state_dim = 8;
        model.sampler.enabled = false;
        let mut data = SyntheticSource {
            feature_dim: 8,
            test_per_class: 4,
            ..SyntheticSource::default()
        };
        data.spec.clips_per_class = 12;
        data.spec.style.texture = 0.01;
        let train = TrainConfig {
            lr: 3e-3,
            epochs: 63,
            max_steps: Some(500),
            batch_size: 8,
            log_every: 50,
            ..TrainConfig::for_protocol(Protocol::ZeroShot)
        };
        RunConfig {
            model,
            train,
            data,
            ..RunConfig::default()
        }
    }

    /// Check the model, training and data sections agree with each other.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.spec.validate()?;
        let s = &self.data.spec;
        let consistent = self.model.feature_dim == self.data.feature_dim
            && self.model.frames == s.frames
            && self.model.grid_h * s.patch == s.height
            && self.model.grid_w * s.patch == s.width;
        if !consistent {
            return Err(crate::SimvaError::validation(format!(
                "model expects {} frames of {}x{} patches with dim {}, data gives {} frames of {}x{} pixels (patch {}) with dim {}",
                self.model.frames,
                self.model.grid_h,
                self.model.grid_w,
                self.model.feature_dim,
                s.frames,
                s.height,
                s.width,
                s.patch,
                self.data.feature_dim
            )));
        }
        Ok(())
    }
}
