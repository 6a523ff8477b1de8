//! Pre-training and fine-tuning loops: learning-rate schedule, early
//! stopping, augmentation, the UNet baseline and the task models.
//!
//! Every random draw comes from a ChaCha stream derived from the run seed, the
//! epoch and a purpose tag, so runs are reproducible and a run resumed at an
//! epoch boundary continues exactly like an uninterrupted one.

mod augment;
mod finetune;
mod predict;
mod pretrain;
mod unet;

pub use augment::{affine_grid, warp_image, warp_labels, AffineParams, AugmentConfig, Augmenter};
pub use finetune::{
    build_samples, evaluate, finetune, Arm, DenseModel, FinetuneConfig, FinetuneOutcome, Frame, Prediction, Sample,
    SubjectResult, Target, TaskModel,
};
pub use predict::{predict_study, read_prediction, write_prediction, StudyPrediction};
pub use pretrain::{fixed_eval_loss, pretrain, pretrain_inputs, PretrainOutcome, PretrainState};
pub use unet::{UNet, UNET_WIDTHS};

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{CheckpointError, ModelError};
use crate::heads::HeadError;
use crate::study::View;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("study {study}: view {view} is required but missing")]
    MissingView { study: String, view: View },
    #[error("study {study}: {what}")]
    DatasetMismatch { study: String, what: String },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pretrain,
    Segmentation,
    Classification,
    Regression,
    LandmarkHeatmap,
    LandmarkCoord,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMetric {
    Mcc,
    AbsErr,
    Dice,
    L2,
}

impl ValMetric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, ValMetric::Mcc | ValMetric::Dice)
    }
}

/// Optimisation and validation settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub end_lr: f64,
    pub batch_size: usize,
    /// Decoupled weight decay, applied to transformer block weights only.
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    #[serde(default)]
    pub label_smoothing: f64,
    /// Validate every this many epochs.
    #[serde(default = "default_val_freq")]
    pub validation_frequency: usize,
    #[serde(default = "default_patience")]
    pub validation_patience: usize,
    #[serde(default = "default_metric")]
    pub validation_metric: ValMetric,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentConfig,
}

fn default_val_freq() -> usize {
    1
}

fn default_patience() -> usize {
    5
}

fn default_metric() -> ValMetric {
    ValMetric::Dice
}

impl TrainConfig {
    /// Pre-training recipe.
    pub fn pretrain() -> Self {
        Self {
            task: Task::Pretrain,
            epochs: 800,
            warmup_epochs: 10,
            peak_lr: 1e-3,
            end_lr: 1e-6,
            batch_size: 128,
            weight_decay: 0.05,
            grad_clip_norm: 5.0,
            label_smoothing: 0.0,
            validation_frequency: 1,
            validation_patience: 5,
            validation_metric: ValMetric::L2,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    /// Fine-tuning recipe for `task`.
    pub fn finetune(task: Task) -> Self {
        let (epochs, warmup, freq, metric) = match task {
            Task::Segmentation => (4000, 50, 100, ValMetric::Dice),
            Task::Classification => (800, 10, 20, ValMetric::Mcc),
            Task::Regression => (800, 10, 20, ValMetric::AbsErr),
            Task::LandmarkHeatmap | Task::LandmarkCoord => (400, 10, 20, ValMetric::L2),
            Task::Pretrain => return Self::pretrain(),
        };
        Self {
            task,
            epochs,
            warmup_epochs: warmup,
            peak_lr: 1e-3,
            end_lr: 1e-5,
            batch_size: 64,
            weight_decay: 0.05,
            grad_clip_norm: 5.0,
            label_smoothing: if task == Task::Classification { 0.1 } else { 0.0 },
            validation_frequency: freq,
            validation_patience: 5,
            validation_metric: metric,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.peak_lr > self.end_lr && self.end_lr > 0.0) {
            return bad(format!("need peak_lr {} > end_lr {} > 0", self.peak_lr, self.end_lr));
        }
        if self.validation_patience == 0 || self.validation_frequency == 0 {
            return bad("validation patience and frequency must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.grad_clip_norm > 0.0) || self.weight_decay < 0.0 {
            return bad("grad_clip_norm must be positive and weight_decay non-negative".into());
        }
        self.augment.validate()
    }
}

/// Linear warm-up from 0 to `peak` over `warmup` steps, then half-cosine decay to `end` at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, peak: f64, end: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return end;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    end + (peak - end) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Batch size actually used: the configured size, capped at the largest power of two not above `n`.
pub fn effective_batch_size(configured: usize, n: usize) -> usize {
    if n == 0 {
        return configured.max(1);
    }
    let cap = 1usize << (usize::BITS - 1 - n.leading_zeros());
    configured.min(cap).max(1)
}

/// Deterministic random stream for `(seed, epoch, purpose)`.
pub fn stream_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64) << 8 | purpose);
    rng
}

/// Outcome of observing one validation value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience-based early stopping. A value counts as an improvement only when
/// it beats the best so far by at least `min_delta` in the favourable direction.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub higher_is_better: bool,
    pub min_delta: f64,
    pub best: Option<f64>,
    /// 1-based index of the best evaluation.
    pub best_eval: usize,
    pub evals: usize,
    pub bad_evals: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        Self { patience, higher_is_better, min_delta: 1e-6, best: None, best_eval: 0, evals: 0, bad_evals: 0 }
    }

    pub fn observe(&mut self, value: f64) -> StopDecision {
        self.evals += 1;
        let improved = match self.best {
            None => !value.is_nan(),
            Some(b) if self.higher_is_better => value >= b + self.min_delta,
            Some(b) => value <= b - self.min_delta,
        };
        if improved {
            self.best = Some(value);
            self.best_eval = self.evals;
            self.bad_evals = 0;
        } else {
            self.bad_evals += 1;
        }
        StopDecision { improved, stop: self.bad_evals >= self.patience }
    }
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_metric: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let (total, warm) = (1000, 100);
        assert_eq!(lr_schedule(0, total, warm, 1e-3, 1e-6), 0.0);
        assert!((lr_schedule(warm, total, warm, 1e-3, 1e-6) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(total, total, warm, 1e-3, 1e-6) - 1e-6).abs() < 1e-18);
        assert!((lr_schedule(total, total, warm, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(50, total, warm, 1e-3, 1e-6) - 5e-4).abs() < 1e-15);
        let before = lr_schedule(warm - 1, total, warm, 1e-3, 1e-6);
        assert!(before < 1e-3);
    }

    #[test]
    fn schedule_is_continuous_at_warmup_junction() {
        let (total, warm) = (5000usize, 500usize);
        // extend the warm-up line to the junction and compare with the cosine branch
        let line = 1e-3 * warm as f64 / warm as f64;
        assert!((line - lr_schedule(warm, total, warm, 1e-3, 1e-6)).abs() < 1e-12);
        let eps_step = lr_schedule(warm + 1, total, warm, 1e-3, 1e-6);
        assert!((eps_step - 1e-3).abs() < 1e-8);
    }

    #[test]
    fn batch_size_reduced_to_power_of_two() {
        assert_eq!(effective_batch_size(64, 1000), 64);
        assert_eq!(effective_batch_size(64, 40), 32);
        assert_eq!(effective_batch_size(64, 32), 32);
        assert_eq!(effective_batch_size(64, 7), 4);
        assert_eq!(effective_batch_size(8, 8), 8);
    }

    #[test]
    fn patience_trace() {
        let mut es = EarlyStopping::new(5, true);
        let vals = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6];
        let decisions: Vec<StopDecision> = vals.iter().map(|&v| es.observe(v)).collect();
        assert!(decisions[..6].iter().all(|d| !d.stop));
        assert!(decisions[6].stop);
        assert_eq!(es.best, Some(0.6));
        assert_eq!(es.best_eval, 2);
        assert_eq!(es.bad_evals, 5);
    }

    #[test]
    fn improvement_threshold_and_direction() {
        let mut es = EarlyStopping::new(2, false);
        assert!(es.observe(1.0).improved);
        assert!(!es.observe(1.0 - 5e-7).improved);
        assert!(es.observe(0.9).improved);
        assert!(!es.observe(0.95).improved);
        assert!(es.observe(0.95).stop);
        assert_eq!(es.best, Some(0.9));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::pretrain().validate().is_ok());
        for t in [Task::Segmentation, Task::Classification, Task::Regression, Task::LandmarkHeatmap, Task::LandmarkCoord] {
            TrainConfig::finetune(t).validate().unwrap();
        }
        let mut c = TrainConfig::pretrain();
        c.warmup_epochs = c.epochs;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretrain();
        c.end_lr = c.peak_lr;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::pretrain();
        c.validation_patience = 0;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::pretrain()).unwrap();
        let bad = json.replace("\"epochs\"", "\"epochz\"");
        assert!(serde_json::from_str::<TrainConfig>(&bad).is_err());
    }

    #[test]
    fn streams_are_distinct_and_repeatable() {
        use rand::Rng;
        let a: u64 = stream_rng(1, 3, 0).random();
        assert_eq!(a, stream_rng(1, 3, 0).random::<u64>());
        assert_ne!(a, stream_rng(1, 3, 1).random::<u64>());
        assert_ne!(a, stream_rng(1, 4, 0).random::<u64>());
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::backbone::{ModelConfig, ViewSpec};
    use crate::dataio::{preprocess_study, GridSpec, PreprocessConfig};
    use crate::phantom::{generate_study, PhantomParams};
    use crate::study::{CineStudy, View};

    /// Small encoder over a 32x32x2 short-axis stack and a 32x32 four-chamber view.
    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 2,
            conv_channels: [4, 4],
            views: vec![ViewSpec::new(View::Sax, [32, 32, 2]), ViewSpec::new(View::Lax4c, [32, 32, 1])],
            mask_ratio: 0.5,
            sax_conv3d: false,
        }
    }

    /// Phantom studies preprocessed onto the grid of [`tiny_config`].
    pub fn tiny_studies(n: usize, seed: u64) -> Vec<CineStudy> {
        let pre = PreprocessConfig {
            sax: GridSpec { spacing: vec![3.0, 3.0, 20.0], size: vec![32, 32, 2] },
            lax: GridSpec { spacing: vec![3.0, 3.0], size: vec![32, 32] },
            normalize: true,
        };
        (0..n)
            .map(|i| {
                let p = PhantomParams {
                    seed: seed * 1000 + i as u64,
                    contraction: 0.7 + 0.02 * i as f64,
                    n_phases: 4,
                    ..PhantomParams::default()
                };
                let s = generate_study(&p, &format!("s{i}")).unwrap();
                preprocess_study(&s, &pre).unwrap()
            })
            .collect()
    }
}
