use std::path::Path;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use super::augment::Augmenter;
use super::finetune::{Frame, Sample};
use super::{effective_batch_size, lr_schedule, stream_rng, LogEntry, Task, TrainConfig, TrainError};
use crate::autograd::Graph;
use crate::backbone::{load_checkpoint, save_checkpoint, view_to_input, CheckpointError, MaeModel, MaskPattern, ModelConfig};
use crate::nn::{AdamW, AdamWConfig, GradBuffer};
use crate::study::CineStudy;

const SHUFFLE: u64 = 0;
const EVAL: u64 = 200;

/// Model inputs of every configured view at `phase`, checked against the model grid.
pub fn pretrain_inputs(study: &CineStudy, config: &ModelConfig, phase: usize) -> Result<Vec<ArrayD<f64>>, TrainError> {
    let mut out = Vec::with_capacity(config.views.len());
    for spec in &config.views {
        let d = study.view(spec.view).ok_or_else(|| TrainError::MissingView { study: study.id.clone(), view: spec.view })?;
        if d.spatial_shape() != spec.size {
            return Err(TrainError::DatasetMismatch {
                study: study.id.clone(),
                what: format!("{} grid {:?} differs from the model grid {:?}", spec.view, d.spatial_shape(), spec.size),
            });
        }
        if phase >= d.n_phases() {
            return Err(TrainError::DatasetMismatch { study: study.id.clone(), what: format!("phase {phase} out of range") });
        }
        out.push(view_to_input(d.phase(phase)));
    }
    Ok(out)
}

/// Everything needed to continue pre-training: weights, optimiser moments and position.
#[derive(Clone, Debug)]
pub struct PretrainState {
    pub model: MaeModel,
    pub optim: AdamW,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: usize,
}

impl PretrainState {
    pub fn new(config: &ModelConfig, train: &TrainConfig) -> Result<Self, TrainError> {
        train.validate()?;
        if train.task != Task::Pretrain {
            return Err(TrainError::InvalidConfig(format!("pre-training config has task {:?}", train.task)));
        }
        let model = MaeModel::new(config, train.seed)?;
        let optim = AdamW::new(AdamWConfig { weight_decay: train.weight_decay, ..AdamWConfig::default() }, &model.store);
        Ok(Self { model, optim, train: train.clone(), epoch: 0, step: 0 })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let meta = json!({
            "model": self.model.config,
            "train": self.train,
            "epoch": self.epoch,
            "step": self.step,
        });
        Ok(save_checkpoint(path, &self.model.store, Some(&self.optim), meta)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let ck = load_checkpoint(path)?;
        let bad = |m: String| TrainError::Checkpoint(CheckpointError::NotCheckpoint(m));
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone()).map_err(|e| bad(e.to_string()))?;
        let train: TrainConfig = serde_json::from_value(ck.meta["train"].clone()).map_err(|e| bad(e.to_string()))?;
        let epoch = ck.meta["epoch"].as_u64().ok_or_else(|| bad("missing epoch".into()))? as usize;
        let step = ck.meta["step"].as_u64().ok_or_else(|| bad("missing step".into()))? as usize;
        let mut state = Self::new(&config, &train)?;
        ck.restore(&mut state.model.store, Some(&mut state.optim))?;
        state.epoch = epoch;
        state.step = step;
        Ok(state)
    }
}

/// Summary of a call to [`pretrain`].
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    /// Mean masked reconstruction loss of every step run in this call.
    pub losses: Vec<f64>,
    pub epochs_run: usize,
    pub finished: bool,
}

/// Continue pre-training from `state` for at most `max_epochs` epochs (all
/// remaining when `None`). Each epoch draws a random phase, augmentation and
/// token mask per study from the epoch's own stream.
pub fn pretrain(
    state: &mut PretrainState,
    studies: &[CineStudy],
    max_epochs: Option<usize>,
    log: &mut dyn FnMut(&LogEntry),
) -> Result<PretrainOutcome, TrainError> {
    if studies.is_empty() {
        return Err(TrainError::EmptySplit("pre-training"));
    }
    for s in studies {
        pretrain_inputs(s, &state.model.config, 0)?;
    }
    let cfg = state.train.clone();
    let n = studies.len();
    let bs = effective_batch_size(cfg.batch_size, n);
    let steps_per_epoch = n.div_ceil(bs);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let augmenter = Augmenter::new(cfg.augment.clone());
    let end = max_epochs.map_or(cfg.epochs, |m| (state.epoch + m).min(cfg.epochs));
    let mut losses = Vec::new();
    let start = state.epoch;
    for epoch in start..end {
        let mut rng = stream_rng(cfg.seed, epoch, SHUFFLE);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            let lr = lr_schedule(state.step, total, warmup, cfg.peak_lr, cfg.end_lr);
            let mut buf = GradBuffer::zeros_like(&state.model.store);
            let mut batch_loss = 0.0;
            for &i in batch {
                let study = &studies[i];
                let phase = rng.random_range(0..study.n_phases());
                let images = pretrain_inputs(study, &state.model.config, phase)?;
                let n_views = images.len();
                let mut sample = Sample {
                    study: study.id.clone(),
                    frames: vec![Frame { phase, images, masks: vec![None; n_views], landmarks: vec![None; n_views] }],
                    scalar: None,
                    target_spacing: [1.0; 3],
                };
                augmenter.apply(&mut sample, false, &mut rng);
                let pattern = MaskPattern::sample(&state.model.config, state.model.config.mask_ratio, &mut rng);
                let mut g = Graph::with_params(&state.model.store);
                let l = state.model.loss(&mut g, &sample.frames[0].images, &pattern)?;
                batch_loss += g.scalar(l);
                let grads = g.backward(l);
                buf.accumulate(&g.param_grads(&grads));
            }
            buf.scale(1.0 / batch.len() as f64);
            buf.clip_global_norm(cfg.grad_clip_norm);
            state.optim.update(&mut state.model.store, &buf, lr);
            let loss = batch_loss / batch.len() as f64;
            losses.push(loss);
            log(&LogEntry { epoch, step: state.step, lr, loss, val_metric: None });
            state.step += 1;
        }
        state.epoch = epoch + 1;
    }
    Ok(PretrainOutcome { losses, epochs_run: state.epoch - start, finished: state.epoch == cfg.epochs })
}

/// Masked reconstruction loss on a fixed phase and fixed masks per study,
/// without augmentation; comparable across checkpoints of the same architecture.
pub fn fixed_eval_loss(model: &MaeModel, studies: &[CineStudy], seed: u64) -> Result<f64, TrainError> {
    if studies.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut rng = stream_rng(seed, 0, EVAL);
    let mut total = 0.0;
    for s in studies {
        let phase = s.ed_phase.unwrap_or(0);
        let images = pretrain_inputs(s, &model.config, phase)?;
        let pattern = MaskPattern::sample(&model.config, model.config.mask_ratio, &mut rng);
        let mut g = Graph::with_params(&model.store);
        let l = model.loss(&mut g, &images, &pattern)?;
        total += g.scalar(l);
    }
    Ok(total / studies.len() as f64)
}
