use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{AlignmentMode, ModelConfig};

/// Every hyperparameter of a training run. Together with the dataset it
/// fully determines the run.
///
/// Defaults reproduce the published protocol: learning rate 1e-5, 50,000
/// iterations, batch size 32, `λ_rec` 1e-5 and `λ_ent` 1e-9, hidden widths
/// 1250.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub lambda_rec: f64,
    pub lambda_ent: f64,
    /// Weight of the MMD or adversarial term; unused by the other modes.
    pub lambda_align: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub alignment_mode: AlignmentMode,
    pub seed: u64,
    pub log_every: usize,
    pub encoder_hidden: usize,
    pub metric_hidden: usize,
    /// Width of the encoded attributes; `None` means the feature dimension.
    pub embed_dim: Option<usize>,
    /// Hidden width of the domain classifier used by the adversarial mode.
    pub classifier_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            max_iterations: 50_000,
            batch_size: 32,
            lambda_rec: 1e-5,
            lambda_ent: 1e-9,
            lambda_align: 1.0,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
            alignment_mode: AlignmentMode::Dsbn,
            seed: 0,
            log_every: 100,
            encoder_hidden: 1250,
            metric_hidden: 1250,
            embed_dim: None,
            classifier_hidden: 64,
        }
    }
}

impl TrainConfig {
    /// Scaled-down settings for single-core runs on the synthetic task.
    pub fn desk_scale() -> Self {
        Self {
            learning_rate: 1e-4,
            max_iterations: 5_000,
            batch_size: 32,
            lambda_rec: 1e-5,
            lambda_ent: 1e-3,
            encoder_hidden: 32,
            metric_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invalid(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        for (name, w) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_ent", self.lambda_ent),
            ("lambda_align", self.lambda_align),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return fail(format!("{name} must be >= 0, got {w}"));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum must lie in [0, 1), got {}", self.bn_momentum));
        }
        if !(self.bn_epsilon > 0.0) || !self.bn_epsilon.is_finite() {
            return fail(format!("bn_epsilon must be > 0, got {}", self.bn_epsilon));
        }
        if self.encoder_hidden == 0 || self.metric_hidden == 0 || self.classifier_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        if self.embed_dim == Some(0) {
            return fail("embed_dim must be positive".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_ent: self.lambda_ent,
            lambda_rec: self.lambda_rec,
            lambda_align: self.lambda_align,
        }
    }

    pub fn model_config(&self, feature_dim: usize, attribute_dim: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            attribute_dim,
            embed_dim: self.embed_dim.unwrap_or(feature_dim),
            encoder_hidden: self.encoder_hidden,
            metric_hidden: self.metric_hidden,
            alignment: self.alignment_mode,
            bn_momentum: self.bn_momentum,
            bn_epsilon: self.bn_epsilon,
        }
    }
}
