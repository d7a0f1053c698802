use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FiouMode;

/// Optimization and schedule settings shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Base learning rate of step 2; `None` reuses `lr`.
    pub lr_step2: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay within a stage.
    pub poly_power: f64,
    pub disc_lr: f64,
    pub disc_momentum: f64,
    pub batch_size: usize,
    /// Square side every training/eval image is resized to.
    pub crop: usize,
    pub lambda_adv: f64,
    pub lambda_pse: f64,
    /// Weight of the auxiliary-head cross-entropy on source batches.
    pub aux_weight: f64,
    /// Fraction of personal training images turned into pseudo labels.
    pub select_rate: f64,
    /// Fraction of pixels kept (lowest entropy first) inside a selected image.
    pub pixel_quantile: f64,
    pub steps_step1: usize,
    pub steps_step2: usize,
    /// Validation on the labeled personal split every this many steps (0 = never).
    pub val_every: usize,
    pub eval_batch_size: usize,
    pub fiou_mode: FiouMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn paper() -> Self {
        Self {
            lr: 2.5e-4,
            lr_step2: None,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            disc_lr: 1e-4,
            disc_momentum: 0.9,
            batch_size: 8,
            crop: 320,
            lambda_adv: 0.001,
            lambda_pse: 1.0,
            aux_weight: 0.4,
            select_rate: 0.5,
            pixel_quantile: 0.8,
            steps_step1: 20_000,
            steps_step2: 10_000,
            val_every: 500,
            eval_batch_size: 8,
            fiou_mode: FiouMode::Binary,
            seed: 0,
        }
    }

    /// Settings for 64×64 synthetic experiments on a CPU.
    pub fn desk() -> Self {
        Self {
            lr: 0.05,
            lr_step2: Some(0.01),
            disc_lr: 1e-3,
            crop: 64,
            lambda_adv: 0.03,
            steps_step1: 400,
            steps_step2: 200,
            val_every: 0,
            eval_batch_size: 16,
            ..Self::paper()
        }
    }

    pub fn stage_lr(&self, step2: bool) -> f64 {
        match (step2, self.lr_step2) {
            (true, Some(lr)) => lr,
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.select_rate > 0.0 && self.select_rate <= 1.0) {
            return Err(Error::invalid(format!("select rate {} not in (0, 1]", self.select_rate)));
        }
        if !(0.0..=1.0).contains(&self.pixel_quantile) {
            return Err(Error::invalid(format!("pixel quantile {} not in [0, 1]", self.pixel_quantile)));
        }
        if !(self.lr > 0.0 && self.disc_lr > 0.0 && self.lr_step2.is_none_or(|v| v > 0.0)) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.crop == 0 {
            return Err(Error::invalid("batch sizes and crop must be positive"));
        }
        if self.steps_step1 == 0 && self.steps_step2 == 0 {
            return Err(Error::invalid("no training steps configured"));
        }
        if self.lambda_adv < 0.0 || self.lambda_pse < 0.0 || self.aux_weight < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}
