//! Adam training with validation-based early stopping, sliding-window
//! inference, metric evaluation, ablation runs and the audio probe.

mod ablate;
mod adam;
mod fit;
mod infer;
mod probe;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricError;
use crate::model::ModelError;

pub use ablate::{ablate_clip_size, ablate_hierarchy, write_ablation, AblationRow};
pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use fit::{batch_gradient, train, write_curve, CurvePoint, TrainOutcome};
pub use infer::{
    evaluate, predict_video, predict_video_with, validation_cc, write_summary, AudioMode, EvalConfig, EvalReport, MetricMeans,
    SaliencyPredictor, VideoScores,
};
pub use probe::{probe_audio, write_probe, write_probe_videos, PairScores, ProbeReport, ProbeVideo};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("gradient for '{name}' has {got} values, parameter has {expected}")]
    GradShape { name: String, expected: usize, got: usize },
    #[error("no gradient for parameter '{0}'")]
    MissingGrad(String),
    #[error("{0}")]
    EmptyDataset(String),
    #[error("video '{0}' has no audio but the model fuses audio")]
    MissingAudio(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_steps: usize,
    /// Steps between validation passes.
    pub val_interval: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub kl_eps: f64,
    /// Ground-truth blur in model-resolution pixels.
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 8,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            max_steps: 2000,
            val_interval: 100,
            patience: 5,
            seed: 0,
            kl_eps: crate::metrics::DEFAULT_EPSILON,
            sigma: crate::metrics::DEFAULT_SIGMA,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        // Zero is accepted: it freezes the weights, which is useful as a control.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.val_interval == 0 {
            return bad("val_interval must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.kl_eps > 0.0) {
            return bad("kl_eps must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        Ok(())
    }
}
