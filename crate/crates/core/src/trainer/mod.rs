//! Supervised warmup, mean-teacher training, model selection and
//! checkpointing.

mod checkpoint;
mod ema;
mod eval;
pub mod loss;
mod optim;
mod perturb;
mod run;

pub use checkpoint::{check_layout, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub use ema::EmaState;
pub use eval::{evaluate, label_mask, predict_masks, Evaluation};
pub use loss::{bce_with_logits, consistency_loss, soft_targets};
pub use optim::{AdamW, ADAM_BETAS, ADAM_EPS};
pub use perturb::{flip_batch, make_views, Flip, PerturbationConfig, Views};
pub use run::{run_training, train_semi, train_supervised, Best, Mode, ModelKind, RunOutcome, StepRecord, TrainData, ValRecord};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::metrics::MetricSet;
use crate::model::{ModelConfig, ModuleToggles, Width};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// EMA smoothing coefficient.
    pub alpha: f64,
    /// Weight of the consistency loss.
    pub beta: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub width_multiplier: Width,
    /// Defaults to `64 * w` rounded to a multiple of 4.
    pub decoder_width: Option<usize>,
    pub perturbation: PerturbationConfig,
    pub toggles: ModuleToggles,
    pub binarize_threshold: f64,
    /// Adds a BCE term on the stride-4 coarse map against a max-pooled mask.
    pub supervise_coarse: bool,
    /// Overrides the number of optimiser steps per epoch.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.99,
            beta: 0.2,
            warmup_epochs: 5,
            total_epochs: 20,
            batch_size: 4,
            learning_rate: 5e-4,
            weight_decay: 0.0025,
            seed: 0,
            width_multiplier: Width::new(1, 4).expect("valid width"),
            decoder_width: None,
            perturbation: PerturbationConfig::default(),
            toggles: ModuleToggles::default(),
            binarize_threshold: 0.5,
            supervise_coarse: false,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width: self.width_multiplier,
            decoder_width: self
                .decoder_width
                .unwrap_or_else(|| ModelConfig::default_decoder_width(self.width_multiplier)),
            toggles: self.toggles,
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            p.push(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            p.push(format!("beta {} must be finite and >= 0", self.beta));
        }
        if self.warmup_epochs > self.total_epochs {
            p.push(format!("warmup_epochs {} exceeds total_epochs {}", self.warmup_epochs, self.total_epochs));
        }
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push(format!("weight_decay {} must be finite and >= 0", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.perturbation.flip_prob) {
            p.push(format!("perturbation.flip_prob {} must lie in [0, 1]", self.perturbation.flip_prob));
        }
        if !(self.perturbation.noise_std >= 0.0 && self.perturbation.noise_std.is_finite()) {
            p.push(format!("perturbation.noise_std {} must be finite and >= 0", self.perturbation.noise_std));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            p.push(format!("binarize_threshold {} must lie in (0, 1)", self.binarize_threshold));
        }
        if self.steps_per_epoch == Some(0) {
            p.push("steps_per_epoch must be at least 1 when set".into());
        }
        if let Err(e) = self.model_config().validate() {
            p.push(e.to_string());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    pub con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(sup: f64, con: f64, beta: f64) -> Self {
        LossBreakdown {
            sup,
            con,
            total: sup + beta * con,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Supervised,
    Semi,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Supervised => "supervised",
            Phase::Semi => "semi",
        }
    }
}

/// Per-epoch summary: mean step losses and validation scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss_sup: f64,
    pub loss_con: f64,
    pub loss_total: f64,
    /// Scores of the student's training-mode predictions on this epoch's
    /// labelled batches.
    pub train: MetricSet,
    pub val_student: Option<MetricSet>,
    pub val_teacher: Option<MetricSet>,
    pub seconds: f64,
}

impl EpochLog {
    /// The better of this epoch's student and teacher scores.
    pub fn val_best(&self) -> Option<MetricSet> {
        let cands: Vec<MetricSet> = self.val_student.iter().chain(&self.val_teacher).copied().collect();
        select_best(&cands).ok().map(|i| cands[i])
    }
}

/// Index of the highest F1; ties go to the higher IoU, then the earlier
/// index.
pub fn select_best(metrics: &[MetricSet]) -> Result<usize> {
    contract!(!metrics.is_empty(), "select_best needs at least one entry");
    let mut best = 0;
    for (i, m) in metrics.iter().enumerate().skip(1) {
        let b = &metrics[best];
        if m.f1 > b.f1 || (m.f1 == b.f1 && m.iou > b.iou) {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(f1: f64, iou: f64) -> MetricSet {
        MetricSet {
            f1,
            precision: 0.0,
            recall: 0.0,
            oa: 0.0,
            kc: 0.0,
            iou,
        }
    }

    #[test]
    fn selection_rule() {
        assert_eq!(select_best(&[m(0.5, 0.0), m(0.7, 0.0), m(0.6, 0.0)]).unwrap(), 1);
        assert_eq!(select_best(&[m(0.7, 0.5), m(0.7, 0.6)]).unwrap(), 1);
        assert_eq!(select_best(&[m(0.7, 0.6), m(0.7, 0.6)]).unwrap(), 0);
        assert_eq!(select_best(&[m(0.1, 0.1)]).unwrap(), 0);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn config_problems_are_collected() {
        let cfg = TrainConfig {
            alpha: 1.5,
            beta: -1.0,
            warmup_epochs: 30,
            batch_size: 0,
            decoder_width: Some(6),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 5);
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().model_config().decoder_width, 16);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainConfig {
            decoder_width: Some(8),
            ..TrainConfig::default()
        };
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"alhpa": 0.5}"#).is_err());
    }
}
