//! Cross-modal contrastive pretraining of paired image-patch and
//! climate-series encoders, fine-tuned for soil organic carbon regression.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode differentiation tape.
//! * [`nn`], [`encoders`]: parameter storage, layers and the four backbones.
//! * [`contrastive`]: projection head, NT-Xent loss and the pretraining loop.
//! * [`finetune`], [`optim`]: regression head, RMSLE, splits and Adam.
//! * [`metrics`], [`baselines`]: evaluation and reference predictors.
//! * [`data`]: feature pipeline, synthetic worlds and the on-disk container.

// `!(x > 0.0)` is kept on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod baselines;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use config::{FeatureToggles, ImageEncoderKind, ModelConfig, Preset, SeriesEncoderKind};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::SoilNet;
pub use tensor::{Tape, Tensor, Var};
