use serde::{Deserialize, Serialize};

use super::freeze::Strategy;
use crate::error::{Error, Result};

/// Optimisation recipe. Defaults are the desk-scale values for training a
/// randomly initialised model; transfer from a strong pretrained model
/// would use a much smaller `base_lr` (4e-6).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Samples per optimizer step.
    pub effective_batch: usize,
    /// Samples per accumulation chunk; must divide `effective_batch`.
    pub micro_batch: usize,
    /// Linear warm-up length; `None` means 5% of `total_steps`.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub lambda_iou: f64,
    pub seed: u64,
    pub strategy: Strategy,
    pub eps_dice: f64,
    /// Validation every this many optimizer steps (and after the last one).
    pub eval_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of each center's images used for training by the protocols.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 0.01,
            effective_batch: 48,
            micro_batch: 4,
            warmup_steps: None,
            total_steps: 200,
            lambda_iou: 1.0,
            seed: 0,
            strategy: Strategy::Full,
            eps_dice: 1.0,
            eval_interval: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            train_fraction: 0.8,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.total_steps / 20)
    }

    pub fn accumulation_steps(&self) -> usize {
        self.effective_batch / self.micro_batch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.base_lr) {
            bad.push("base_lr must be positive".to_string());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad.push("weight_decay must be non-negative".into());
        }
        if self.micro_batch == 0 || self.effective_batch == 0 {
            bad.push("batch sizes must be positive".into());
        } else if !self.effective_batch.is_multiple_of(self.micro_batch) {
            bad.push(format!(
                "effective_batch {} is not divisible by micro_batch {}",
                self.effective_batch, self.micro_batch
            ));
        }
        if self.total_steps == 0 {
            bad.push("total_steps must be positive".into());
        } else if self.warmup() >= self.total_steps {
            bad.push(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup(),
                self.total_steps
            ));
        }
        if !(self.lambda_iou.is_finite() && self.lambda_iou >= 0.0) {
            bad.push("lambda_iou must be non-negative".into());
        }
        if !(self.eps_dice.is_finite() && self.eps_dice >= 0.0) {
            bad.push("eps_dice must be non-negative".into());
        }
        if self.eval_interval == 0 {
            bad.push("eval_interval must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("{name} must lie in [0, 1)"));
            }
        }
        if !pos(self.adam_eps) {
            bad.push("adam_eps must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            bad.push("train_fraction must lie in (0, 1)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Learning rate at optimizer step `step` (0-based): linear warm-up reaching
/// `base_lr` at `warmup − 1`, then half-cosine annealing towards zero.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let (w, t) = (cfg.warmup(), cfg.total_steps);
    if step >= t {
        return Err(Error::Range(format!("step {step} outside [0, {t})")));
    }
    if step < w {
        return Ok(cfg.base_lr * (step + 1) as f64 / w as f64);
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
