//! Patch-level video-text similarity volumes refined by spatial attention,
//! motion modulation and a causal selective scan, with the training,
//! evaluation and checking harness around them.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod error;
pub mod features;
pub mod harness;
pub mod head;
pub mod model;
pub mod motion;
pub mod nn;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod similarity;
pub mod spatial;
pub mod temporal;
pub mod wse;
pub mod tensor;

pub use error::{Result, SimvaError};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/similarity.md")]
    mod similarity {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/spatial.md")]
    mod spatial {}
    #[doc = include_str!("../../../book/src/motion.md")]
    mod motion {}
    #[doc = include_str!("../../../book/src/temporal.md")]
    mod temporal {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
