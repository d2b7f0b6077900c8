use serde::{Deserialize, Serialize};

use crate::error::{ComboError, Result};
use crate::tensor::Precision;

/// Optimization recipe. Defaults: batch 64, AdamW at 1e-3 with weight decay
/// 1e-4, 100 epochs with 10 warmup epochs then cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Group-sparsity coefficient on per-backbone projection norms.
    pub lambda_reg: f64,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

/// Coefficient used when scoring backbone relevance.
pub const SCORING_LAMBDA: f64 = 0.01;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 100,
            warmup_epochs: 10,
            peak_lr: 1e-3,
            weight_decay: 1e-4,
            lambda_reg: 0.0,
            seed: 0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ComboError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.peak_lr > 0.0) {
            return bad(format!("peak_lr must be positive, got {}", self.peak_lr));
        }
        if !(self.lambda_reg >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lambda_reg and weight_decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid AdamW betas/eps".into());
        }
        Ok(())
    }
}
