use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, ArrayView3, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::Augmenter;
use super::unet::{UNet, UNET_WIDTHS};
use super::{effective_batch_size, lr_schedule, stream_rng, EarlyStopping, LogEntry, Task, TrainConfig, TrainError, ValMetric};
use crate::autograd::{Graph, Var};
use crate::backbone::{view_to_input, ModelConfig, MultiViewEncoder};
use crate::heads::{
    ce_label_smooth, default_widths, dice_ce, encode_full, gaussian_heatmap, heatmap_loss, mse, one_hot, pool_tokens,
    wing_loss, LinearHead, UnetrHead, HEATMAP_SIGMA, N_LANDMARKS, WING_EPS, WING_W,
};
use crate::metrics::{classification_metrics, dice, ef, heatmap_to_landmarks, landmark_error, mask_volume, ConfusionCounts, Landmarks};
use crate::nn::{AdamW, AdamWConfig, GradBuffer, ParamStore};
use crate::study::{label, CineStudy, View};

/// Model arm of a fine-tuning experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Encoder initialised from a pre-trained checkpoint.
    FineTune,
    /// Same architecture, random initialisation.
    RandInit,
    /// Convolutional baseline on the target view alone.
    Unet,
}

impl Arm {
    pub fn key(self) -> &'static str {
        match self {
            Arm::FineTune => "finetune",
            Arm::RandInit => "randinit",
            Arm::Unet => "unet",
        }
    }
}

/// Task definition and model choice of a fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub arm: Arm,
    /// Encoder input views; the other branches of a pre-trained model are dropped.
    pub views: Vec<View>,
    /// View carrying the dense target or the landmarks.
    pub target_view: View,
    /// Key of the study scalar used by classification and regression.
    #[serde(default)]
    pub target_key: Option<String>,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default)]
    pub head_widths: Option<[usize; 4]>,
    #[serde(default = "default_unet_widths")]
    pub unet_widths: Vec<usize>,
}

fn default_classes() -> usize {
    2
}

fn default_unet_widths() -> Vec<usize> {
    UNET_WIDTHS.to_vec()
}

impl FinetuneConfig {
    pub fn new(task: Task, arm: Arm, views: Vec<View>, target_view: View) -> Self {
        Self {
            train: TrainConfig::finetune(task),
            arm,
            views,
            target_view,
            target_key: None,
            n_classes: 2,
            head_widths: None,
            unet_widths: UNET_WIDTHS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.train.validate()?;
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let task = self.train.task;
        if task == Task::Pretrain {
            return bad("fine-tuning config with task pretrain".into());
        }
        if self.views.is_empty() {
            return bad("no input views".into());
        }
        let dense_target = matches!(task, Task::Segmentation | Task::LandmarkHeatmap | Task::LandmarkCoord);
        if dense_target && !self.views.contains(&self.target_view) {
            return bad(format!("target view {} is not an input view", self.target_view));
        }
        if matches!(task, Task::LandmarkHeatmap | Task::LandmarkCoord) && !self.target_view.is_lax() {
            return bad("landmarks are defined on long-axis views".into());
        }
        if matches!(task, Task::Classification | Task::Regression) && self.target_key.is_none() {
            return bad("classification and regression need target_key".into());
        }
        if task == Task::Classification && self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        if self.arm == Arm::Unet {
            if !matches!(task, Task::Segmentation | Task::LandmarkHeatmap) {
                return bad("the UNet baseline covers segmentation and heatmap tasks".into());
            }
            if self.unet_widths.is_empty() || self.unet_widths.contains(&0) {
                return bad("unet_widths must be non-empty and positive".into());
            }
        }
        let expected_metric = match task {
            Task::Segmentation => ValMetric::Dice,
            Task::Classification => ValMetric::Mcc,
            Task::Regression => ValMetric::AbsErr,
            _ => ValMetric::L2,
        };
        if self.train.validation_metric != expected_metric {
            return bad(format!("task {task:?} validates with {expected_metric:?}"));
        }
        Ok(())
    }
}

/// Inputs and targets of one cardiac phase, per model view.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub phase: usize,
    /// `[1, D, H, W]` per view.
    pub images: Vec<ArrayD<f64>>,
    /// `[D, H, W]` labels per view, when annotated.
    pub masks: Vec<Option<Array3<u8>>>,
    /// Landmarks in pixel coordinates `(H, W)` per view, when annotated.
    pub landmarks: Vec<Option<Landmarks>>,
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub study: String,
    /// One frame for dense and landmark tasks, ED then ES for tabular tasks.
    pub frames: Vec<Frame>,
    pub scalar: Option<f64>,
    /// Spacing `(H, W, D)` in mm of the target view.
    pub target_spacing: [f64; 3],
}

/// `[D, H, W]` labels from a `[X, Y, Z]` study mask.
fn labels_to_model_layout(m: ArrayView3<u8>) -> Array3<u8> {
    m.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

fn frame_for(study: &CineStudy, config: &ModelConfig, phase: usize) -> Result<Frame, TrainError> {
    let mut frame = Frame { phase, images: Vec::new(), masks: Vec::new(), landmarks: Vec::new() };
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
        frame.images.push(view_to_input(d.phase(phase)));
        frame.masks.push(d.mask_phase(phase).map(labels_to_model_layout));
        frame.landmarks.push(d.landmarks.as_ref().map(|l| {
            let mut out = [[0.0; 2]; 3];
            for (p, o) in out.iter_mut().enumerate() {
                *o = [l[[phase, p, 0]] / d.spacing[0], l[[phase, p, 1]] / d.spacing[1]];
            }
            out
        }));
    }
    Ok(frame)
}

fn ed_es(study: &CineStudy) -> Result<(usize, usize), TrainError> {
    match (study.ed_phase, study.es_phase) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(TrainError::DatasetMismatch { study: study.id.clone(), what: "ED/ES phases are not annotated".into() }),
    }
}

/// Build the examples of a task from preprocessed studies on the model grid.
pub fn build_samples(studies: &[CineStudy], config: &ModelConfig, ft: &FinetuneConfig) -> Result<Vec<Sample>, TrainError> {
    let task = ft.train.task;
    let target_idx = config.views.iter().position(|s| s.view == ft.target_view);
    let mut out = Vec::new();
    for s in studies {
        let (ed, es) = ed_es(s)?;
        let target_spacing = s
            .view(ft.target_view)
            .map(|d| [d.spacing[0], d.spacing[1], d.spacing[2]])
            .ok_or_else(|| TrainError::MissingView { study: s.id.clone(), view: ft.target_view })?;
        match task {
            Task::Classification | Task::Regression => {
                let key = ft.target_key.as_deref().expect("validated");
                let scalar = *s.gt_scalars.get(key).ok_or_else(|| TrainError::DatasetMismatch {
                    study: s.id.clone(),
                    what: format!("missing scalar {key}"),
                })?;
                if task == Task::Classification && (scalar < 0.0 || scalar.fract() != 0.0 || scalar as usize >= ft.n_classes) {
                    return Err(TrainError::DatasetMismatch { study: s.id.clone(), what: format!("class label {scalar}") });
                }
                let frames = vec![frame_for(s, config, ed)?, frame_for(s, config, es)?];
                out.push(Sample { study: s.id.clone(), frames, scalar: Some(scalar), target_spacing });
            }
            _ => {
                for phase in [ed, es] {
                    let frame = frame_for(s, config, phase)?;
                    let t = target_idx.expect("validated");
                    let ok = match task {
                        Task::Segmentation => frame.masks[t].is_some(),
                        _ => frame.landmarks[t].is_some(),
                    };
                    if !ok {
                        return Err(TrainError::DatasetMismatch {
                            study: s.id.clone(),
                            what: format!("{} has no {} annotation", ft.target_view, if task == Task::Segmentation { "mask" } else { "landmark" }),
                        });
                    }
                    out.push(Sample { study: s.id.clone(), frames: vec![frame], scalar: None, target_spacing });
                }
            }
        }
    }
    Ok(out)
}

/// Network behind a task model.
#[derive(Clone, Debug)]
pub enum DenseModel {
    Cinema { encoder: MultiViewEncoder, dense: Option<UnetrHead>, linear: Option<LinearHead> },
    Unet(UNet),
}

/// Prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Mask(Array3<u8>),
    /// Pixel coordinates `(H, W)`.
    Landmarks(Landmarks),
    Scalar(f64),
    Class { label: usize, score: f64 },
}

/// Target of one sample in the form compared with a [`Prediction`].
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Mask(Array3<u8>),
    Landmarks(Landmarks),
    Scalar(f64),
    Class(usize),
}

/// Encoder or UNet plus task head with its parameters.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub task: Task,
    pub arm: Arm,
    pub config: ModelConfig,
    pub target: usize,
    pub store: ParamStore,
    pub net: DenseModel,
}

impl TaskModel {
    /// Build the model of `ft` for a backbone architecture. The fine-tune arm
    /// copies every encoder tensor of the kept views from `pretrained`.
    pub fn new(
        backbone: &ModelConfig,
        ft: &FinetuneConfig,
        pretrained: Option<&ParamStore>,
        seed: u64,
    ) -> Result<Self, TrainError> {
        ft.validate()?;
        let task = ft.train.task;
        let config = backbone.with_views(&ft.views)?;
        let target = config.views.iter().position(|s| s.view == ft.target_view).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let mut store = ParamStore::new();
        let out_channels = match task {
            Task::Segmentation => label::N_CLASSES,
            _ => N_LANDMARKS,
        };
        let net = if ft.arm == Arm::Unet {
            let spec = config.spec(ft.target_view).expect("validated");
            let net = UNet::new(&mut store, &mut rng, "head/unet", &ft.unet_widths, out_channels, spec.view == View::Sax);
            let m = net.required_multiple();
            if spec.size[0] % m != 0 || spec.size[1] % m != 0 {
                return Err(TrainError::InvalidConfig(format!("{} in-plane size must be divisible by {m}", spec.view)));
            }
            DenseModel::Unet(net)
        } else {
            let encoder = MultiViewEncoder::new(&mut store, &mut rng, &config)?;
            let n_encoder = store.len();
            let widths = ft.head_widths.unwrap_or_else(|| default_widths(&encoder));
            let e = config.embed_dim;
            let (dense, linear) = match task {
                Task::Segmentation | Task::LandmarkHeatmap => {
                    (Some(UnetrHead::new(&mut store, &mut rng, "head/dense", &encoder, ft.target_view, widths, out_channels)?), None)
                }
                Task::LandmarkCoord => (None, Some(LinearHead::new(&mut store, &mut rng, "head/coord", e, 2 * N_LANDMARKS))),
                Task::Regression => (None, Some(LinearHead::new(&mut store, &mut rng, "head/reg", 2 * e, 1))),
                Task::Classification => {
                    let n_out = if ft.n_classes == 2 { 1 } else { ft.n_classes };
                    (None, Some(LinearHead::new(&mut store, &mut rng, "head/cls", 2 * e, n_out)))
                }
                Task::Pretrain => unreachable!("validated"),
            };
            if ft.arm == Arm::FineTune {
                let src = pretrained.ok_or_else(|| TrainError::InvalidConfig("fine-tune arm needs a pre-trained checkpoint".into()))?;
                let mut enc_only = ParamStore::new();
                for id in store.ids().take(n_encoder) {
                    enc_only.add(store.name(id), store.value(id).clone(), store.decays(id));
                }
                let copied = enc_only.load_matching(src);
                if copied != n_encoder {
                    return Err(TrainError::InvalidConfig(format!(
                        "pre-trained checkpoint provides {copied} of {n_encoder} encoder tensors"
                    )));
                }
                store.load_matching(&enc_only);
            }
            DenseModel::Cinema { encoder, dense, linear }
        };
        Ok(Self { task, arm: ft.arm, config, target, store, net })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Dense logits `[C, D, H, W]` of the target view, or pooled encoder features.
    fn frame_output(&self, g: &mut Graph, frame: &Frame) -> Result<Var, TrainError> {
        match &self.net {
            DenseModel::Unet(net) => {
                let x = g.input(frame.images[self.target].clone());
                Ok(net.forward(g, x))
            }
            DenseModel::Cinema { encoder, dense, .. } => {
                let enc = encode_full(g, encoder, &frame.images)?;
                match dense {
                    Some(h) => Ok(h.forward(g, encoder, &enc, &frame.images[self.target])?),
                    None => Ok(pool_tokens(g, encoder, &enc)),
                }
            }
        }
    }

    /// Raw model output for a sample: dense logits, or head outputs for tabular and coordinate tasks.
    pub fn output(&self, g: &mut Graph, sample: &Sample) -> Result<Var, TrainError> {
        let linear = match &self.net {
            DenseModel::Cinema { linear: Some(l), .. } => Some(l),
            _ => None,
        };
        match (self.task, linear) {
            (Task::Classification | Task::Regression, Some(l)) => {
                let a = self.frame_output(g, &sample.frames[0])?;
                let b = self.frame_output(g, &sample.frames[1])?;
                let f = g.concat(&[a, b], 0);
                Ok(l.apply(g, f))
            }
            (Task::LandmarkCoord, Some(l)) => {
                let f = self.frame_output(g, &sample.frames[0])?;
                Ok(l.apply(g, f))
            }
            _ => self.frame_output(g, &sample.frames[0]),
        }
    }

    pub fn target(&self, sample: &Sample) -> Result<Target, TrainError> {
        let f = &sample.frames[0];
        let missing = |what: &str| TrainError::DatasetMismatch { study: sample.study.clone(), what: format!("missing {what}") };
        Ok(match self.task {
            Task::Segmentation => Target::Mask(f.masks[self.target].clone().ok_or_else(|| missing("mask"))?),
            Task::LandmarkHeatmap | Task::LandmarkCoord => Target::Landmarks(f.landmarks[self.target].ok_or_else(|| missing("landmarks"))?),
            Task::Regression => Target::Scalar(sample.scalar.ok_or_else(|| missing("scalar"))?),
            Task::Classification => Target::Class(sample.scalar.ok_or_else(|| missing("label"))? as usize),
            Task::Pretrain => unreachable!("no pretraining task model"),
        })
    }

    /// Training loss of one sample.
    pub fn loss(&self, g: &mut Graph, sample: &Sample, label_smoothing: f64) -> Result<Var, TrainError> {
        let y = self.output(g, sample)?;
        Ok(match self.target(sample)? {
            Target::Mask(m) => dice_ce(g, y, &one_hot(m.view().into_dyn(), label::N_CLASSES)),
            Target::Landmarks(l) => {
                if self.task == Task::LandmarkCoord {
                    let t: Vec<f64> = l.iter().flatten().copied().collect();
                    wing_loss(g, y, &ArrayD::from_shape_vec(IxDyn(&[6]), t).expect("six coordinates"), WING_W, WING_EPS)
                } else {
                    let s = g.shape(y).to_vec();
                    let maps = gaussian_heatmap(&l, [s[2], s[3]], [1.0, 1.0], HEATMAP_SIGMA)?;
                    heatmap_loss(g, y, &maps.into_shape_with_order(IxDyn(&s)).expect("heatmap layout"))
                }
            }
            Target::Scalar(v) => mse(g, y, &ArrayD::from_elem(IxDyn(&[1]), v)),
            Target::Class(c) => ce_label_smooth(g, y, c, label_smoothing),
        })
    }

    pub fn predict(&self, sample: &Sample) -> Result<Prediction, TrainError> {
        let mut g = Graph::with_params(&self.store);
        let y = self.output(&mut g, sample)?;
        let v = g.value(y);
        Ok(match self.task {
            Task::Segmentation => Prediction::Mask(argmax_channels(v)),
            Task::LandmarkHeatmap => {
                let s = v.shape();
                let maps = v.to_shape((s[0], s[2], s[3])).expect("single-slice heatmap").to_owned();
                Prediction::Landmarks(heatmap_to_landmarks(maps.view(), [1.0, 1.0]).points)
            }
            Task::LandmarkCoord => {
                let c: Vec<f64> = v.iter().copied().collect();
                Prediction::Landmarks([[c[0], c[1]], [c[2], c[3]], [c[4], c[5]]])
            }
            Task::Regression => Prediction::Scalar(v[[0]]),
            Task::Classification => {
                if v.len() == 1 {
                    let p = 1.0 / (1.0 + (-v[[0]]).exp());
                    Prediction::Class { label: (p >= 0.5) as usize, score: p }
                } else {
                    let (label, _) = v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b });
                    let m = v.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                    let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
                    Prediction::Class { label, score: 1.0 - (v[[0]] - m).exp() / z }
                }
            }
            Task::Pretrain => unreachable!("no pretraining task model"),
        })
    }
}

/// Channel argmax of `[C, D, H, W]` logits; ties go to the lower class.
fn argmax_channels(v: &ArrayD<f64>) -> Array3<u8> {
    let s = v.shape();
    let mut out = Array3::zeros((s[1], s[2], s[3]));
    let lanes = v.view().into_dimensionality::<ndarray::Ix4>().expect("4-d logits");
    for ((d, h, w), o) in out.indexed_iter_mut() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..s[0] {
            let x = lanes[[c, d, h, w]];
            if x > best.1 {
                best = (c, x);
            }
        }
        *o = best.0 as u8;
    }
    out
}

/// Metrics of one study, averaged over its samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub study: String,
    pub metrics: BTreeMap<String, f64>,
}

/// Evaluate on `samples`; returns per-study metrics and the validation metric.
pub fn evaluate(model: &TaskModel, samples: &[Sample]) -> Result<(Vec<SubjectResult>, f64), TrainError> {
    let mut per_study: BTreeMap<String, Vec<BTreeMap<String, f64>>> = BTreeMap::new();
    let mut lv_volumes: BTreeMap<String, Vec<(usize, f64, f64)>> = BTreeMap::new();
    let mut cls: Vec<(bool, bool)> = Vec::new();
    for s in samples {
        let pred = model.predict(s)?;
        let target = model.target(s)?;
        let mut m = BTreeMap::new();
        match (&pred, &target) {
            (Prediction::Mask(p), Target::Mask(t)) => {
                let mut sum = 0.0;
                for (name, l) in [("dice_rv", label::RV), ("dice_myo", label::MYO), ("dice_lv", label::LV)] {
                    let d = dice(p.view().into_dyn(), t.view().into_dyn(), l).expect("same grid");
                    m.insert(name.to_string(), d);
                    sum += d;
                }
                m.insert("dice".into(), sum / 3.0);
                if model.config.views[model.target].view == View::Sax {
                    let sp = [s.target_spacing[0], s.target_spacing[1], s.target_spacing[2]];
                    let pv = mask_volume(p.view().permuted_axes([1, 2, 0]), label::LV, sp).expect("valid label");
                    let tv = mask_volume(t.view().permuted_axes([1, 2, 0]), label::LV, sp).expect("valid label");
                    lv_volumes.entry(s.study.clone()).or_default().push((s.frames[0].phase, pv, tv));
                }
            }
            (Prediction::Landmarks(p), Target::Landmarks(t)) => {
                let mm = |l: &Landmarks| l.map(|q| [q[0] * s.target_spacing[0], q[1] * s.target_spacing[1]]);
                m.insert("l2".into(), landmark_error(&mm(p), &mm(t)));
            }
            (Prediction::Scalar(p), Target::Scalar(t)) => {
                m.insert("abs_err".into(), (p - t).abs());
                m.insert("prediction".into(), *p);
            }
            (Prediction::Class { label, score }, Target::Class(t)) => {
                m.insert("correct".into(), (*label == *t) as u8 as f64);
                m.insert("score".into(), *score);
                cls.push((*label != 0, *t != 0));
            }
            _ => unreachable!("prediction and target kinds follow the task"),
        }
        per_study.entry(s.study.clone()).or_default().push(m);
    }
    let mut results = Vec::new();
    for (study, ms) in per_study {
        let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
        for m in &ms {
            for (k, v) in m {
                *metrics.entry(k.clone()).or_default() += v / ms.len() as f64;
            }
        }
        if let Some(vols) = lv_volumes.get(&study) {
            if vols.len() == 2 {
                let (pe, te) = (ef(vols[0].1, vols[1].1), ef(vols[0].2, vols[1].2));
                if let (Ok(pe), Ok(te)) = (pe, te) {
                    metrics.insert("lvef_abs_err".into(), (pe - te).abs());
                }
            }
        }
        results.push(SubjectResult { study, metrics });
    }
    let mean_of = |k: &str| {
        let v: Vec<f64> = results.iter().filter_map(|r| r.metrics.get(k).copied()).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let val = match model.task {
        Task::Segmentation => mean_of("dice"),
        Task::LandmarkHeatmap | Task::LandmarkCoord => mean_of("l2"),
        Task::Regression => mean_of("abs_err"),
        Task::Classification => {
            let pred: Vec<bool> = cls.iter().map(|c| c.0).collect();
            let truth: Vec<bool> = cls.iter().map(|c| c.1).collect();
            classification_metrics(&ConfusionCounts::from_predictions(&pred, &truth)).map(|c| c.mcc).unwrap_or(0.0)
        }
        Task::Pretrain => unreachable!(),
    };
    Ok((results, val))
}

/// Result of a fine-tuning run; `model` holds the best validated weights.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: TaskModel,
    pub best_metric: f64,
    /// Epoch (1-based) of the restored checkpoint.
    pub best_epoch: usize,
    /// `(epoch, metric)` of every validation.
    pub evals: Vec<(usize, f64)>,
    pub stopped_early: bool,
    pub losses: Vec<f64>,
}

/// Fine-tune with AdamW, warm-up plus cosine schedule, gradient clipping and
/// patience-based early stopping on the validation split; restores the best weights.
pub fn finetune(
    backbone: &ModelConfig,
    ft: &FinetuneConfig,
    pretrained: Option<&ParamStore>,
    train: &[CineStudy],
    val: &[CineStudy],
    log: &mut dyn FnMut(&LogEntry),
) -> Result<FinetuneOutcome, TrainError> {
    ft.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let cfg = &ft.train;
    let mut model = TaskModel::new(backbone, ft, pretrained, cfg.seed)?;
    let train_samples = build_samples(train, &model.config, ft)?;
    let val_samples = build_samples(val, &model.config, ft)?;
    let n = train_samples.len();
    let bs = effective_batch_size(cfg.batch_size, n);
    let steps_per_epoch = n.div_ceil(bs);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut optim = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &model.store);
    let augmenter = Augmenter::new(cfg.augment.clone());
    let mut stopper = EarlyStopping::new(cfg.validation_patience, cfg.validation_metric.higher_is_better());
    let mut best_store = model.store.clone();
    let mut best_epoch = 0;
    let mut evals = Vec::new();
    let mut losses = Vec::new();
    let mut stopped_early = false;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = stream_rng(cfg.seed, epoch, 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(bs) {
            let lr = lr_schedule(step, total, warmup, cfg.peak_lr, cfg.end_lr);
            let mut buf = GradBuffer::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut s = train_samples[i].clone();
                augmenter.apply(&mut s, cfg.task == Task::Segmentation, &mut rng);
                if matches!(cfg.task, Task::LandmarkHeatmap | Task::LandmarkCoord) && !landmarks_inside(&s, model.target) {
                    s = train_samples[i].clone();
                }
                let mut g = Graph::with_params(&model.store);
                let l = model.loss(&mut g, &s, cfg.label_smoothing)?;
                batch_loss += g.scalar(l);
                let grads = g.backward(l);
                buf.accumulate(&g.param_grads(&grads));
            }
            buf.scale(1.0 / batch.len() as f64);
            buf.clip_global_norm(cfg.grad_clip_norm);
            optim.update(&mut model.store, &buf, lr);
            let loss = batch_loss / batch.len() as f64;
            losses.push(loss);
            log(&LogEntry { epoch, step, lr, loss, val_metric: None });
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.validation_frequency == 0 || last {
            let (_, metric) = evaluate(&model, &val_samples)?;
            evals.push((epoch + 1, metric));
            log(&LogEntry { epoch, step, lr: lr_schedule(step, total, warmup, cfg.peak_lr, cfg.end_lr), loss: *losses.last().unwrap_or(&f64::NAN), val_metric: Some(metric) });
            let d = stopper.observe(metric);
            if d.improved {
                best_store = model.store.clone();
                best_epoch = epoch + 1;
            }
            if d.stop {
                stopped_early = !last;
                break;
            }
        }
    }
    model.store = best_store;
    Ok(FinetuneOutcome { model, best_metric: stopper.best.unwrap_or(f64::NAN), best_epoch, evals, stopped_early, losses })
}

fn landmarks_inside(s: &Sample, target: usize) -> bool {
    s.frames.iter().all(|f| {
        let shape = f.images[target].shape();
        f.landmarks[target].is_none_or(|l| {
            l.iter().all(|p| (0.0..=(shape[2] as f64 - 1.0)).contains(&p[0]) && (0.0..=(shape[3] as f64 - 1.0)).contains(&p[1]))
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::MaeModel;
    use crate::training::fixtures::{tiny_config, tiny_studies};
    use crate::training::AugmentConfig;

    fn quick(task: Task, arm: Arm, views: Vec<View>, target: View) -> FinetuneConfig {
        let mut ft = FinetuneConfig::new(task, arm, views, target);
        ft.train.epochs = 4;
        ft.train.warmup_epochs = 1;
        ft.train.batch_size = 2;
        ft.train.validation_frequency = 1;
        ft.train.augment = AugmentConfig::disabled();
        ft.head_widths = Some([4, 4, 4, 4]);
        ft.unet_widths = vec![4, 8];
        ft
    }

    #[test]
    fn samples_per_task() {
        let studies = tiny_studies(2, 0);
        let cfg = tiny_config();
        let seg = quick(Task::Segmentation, Arm::RandInit, vec![View::Lax4c], View::Lax4c);
        let m = cfg.with_views(&seg.views).unwrap();
        let s = build_samples(&studies, &m, &seg).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].frames[0].masks[0].as_ref().unwrap().shape(), &[1, 32, 32]);
        let mut reg = quick(Task::Regression, Arm::RandInit, vec![View::Sax, View::Lax4c], View::Sax);
        reg.target_key = Some("ef".into());
        let s = build_samples(&studies, &cfg, &reg).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].frames.len(), 2);
        assert_eq!(s[0].scalar, Some(studies[0].gt_scalars["ef"]));
        let mut missing = studies.clone();
        missing[1].views.remove(&View::Lax4c);
        assert!(matches!(build_samples(&missing, &m, &seg), Err(TrainError::MissingView { view: View::Lax4c, .. })));
    }

    #[test]
    fn landmarks_are_converted_to_pixels() {
        let studies = tiny_studies(1, 0);
        let ft = quick(Task::LandmarkCoord, Arm::RandInit, vec![View::Lax4c], View::Lax4c);
        let cfg = tiny_config().with_views(&ft.views).unwrap();
        let s = build_samples(&studies, &cfg, &ft).unwrap();
        let d = studies[0].view(View::Lax4c).unwrap();
        let px = s[0].frames[0].landmarks[0].unwrap();
        assert!((px[2][0] * 3.0 - d.landmarks.as_ref().unwrap()[[0, 2, 0]]).abs() < 1e-12);
    }

    #[test]
    fn fine_tune_arm_copies_every_encoder_tensor() {
        let cfg = tiny_config();
        let pre = MaeModel::new(&cfg, 5).unwrap();
        let ft = quick(Task::Segmentation, Arm::FineTune, vec![View::Lax4c], View::Lax4c);
        let m = TaskModel::new(&cfg, &ft, Some(&pre.store), 1).unwrap();
        let mut n = 0;
        for id in m.store.ids() {
            let name = m.store.name(id);
            if name.starts_with("enc.") {
                assert_eq!(m.store.value(id), pre.store.value(pre.store.find(name).unwrap()), "{name}");
                n += 1;
            }
        }
        assert!(n > 0);
        assert!(m.store.ids().all(|id| !m.store.name(id).starts_with("enc.sax")));
        let rand = TaskModel::new(&cfg, &quick(Task::Segmentation, Arm::RandInit, vec![View::Lax4c], View::Lax4c), None, 1).unwrap();
        let id = rand.store.find("enc.lax_4c.conv1.w").unwrap();
        assert_ne!(rand.store.value(id), pre.store.value(pre.store.find("enc.lax_4c.conv1.w").unwrap()));
        assert!(TaskModel::new(&cfg, &ft, None, 1).is_err());
    }

    #[test]
    fn config_rules() {
        let mut c = quick(Task::Classification, Arm::RandInit, vec![View::Sax], View::Sax);
        assert!(c.validate().is_err());
        c.target_key = Some("cls".into());
        c.validate().unwrap();
        let c = quick(Task::LandmarkCoord, Arm::Unet, vec![View::Lax4c], View::Lax4c);
        assert!(c.validate().is_err());
        let c = quick(Task::LandmarkHeatmap, Arm::RandInit, vec![View::Sax], View::Sax);
        assert!(c.validate().is_err());
        let mut c = quick(Task::Segmentation, Arm::RandInit, vec![View::Lax4c], View::Lax4c);
        c.train.validation_metric = ValMetric::L2;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&quick(Task::Segmentation, Arm::Unet, vec![View::Lax4c], View::Lax4c)).unwrap();
        let back: FinetuneConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.arm, Arm::Unet);
        assert!(serde_json::from_str::<FinetuneConfig>(&json.replace("\"arm\"", "\"armm\"")).is_err());
    }

    #[test]
    fn predictions_follow_the_task() {
        let cfg = tiny_config();
        let studies = tiny_studies(1, 0);
        for (task, arm) in [
            (Task::Segmentation, Arm::Unet),
            (Task::LandmarkHeatmap, Arm::RandInit),
            (Task::LandmarkCoord, Arm::RandInit),
        ] {
            let ft = quick(task, arm, vec![View::Lax4c], View::Lax4c);
            let m = TaskModel::new(&cfg, &ft, None, 0).unwrap();
            let s = build_samples(&studies, &m.config, &ft).unwrap();
            match m.predict(&s[0]).unwrap() {
                Prediction::Mask(p) => assert_eq!(p.shape(), &[1, 32, 32]),
                Prediction::Landmarks(l) => assert!(l.iter().flatten().all(|v| v.is_finite())),
                other => panic!("{other:?}"),
            }
            let mut g = Graph::with_params(&m.store);
            let l = m.loss(&mut g, &s[0], 0.0).unwrap();
            assert!(g.scalar(l).is_finite());
        }
        let mut ft = quick(Task::Classification, Arm::RandInit, vec![View::Sax, View::Lax4c], View::Sax);
        ft.target_key = Some("cls".into());
        let mut labelled = studies.clone();
        labelled[0].gt_scalars.insert("cls".into(), 1.0);
        let m = TaskModel::new(&cfg, &ft, None, 0).unwrap();
        let s = build_samples(&labelled, &m.config, &ft).unwrap();
        assert!(matches!(m.predict(&s[0]).unwrap(), Prediction::Class { score, .. } if (0.0..=1.0).contains(&score)));
        labelled[0].gt_scalars.insert("cls".into(), 2.0);
        assert!(build_samples(&labelled, &m.config, &ft).is_err());
    }

    #[test]
    fn dropping_views_shrinks_the_model_and_decay_covers_block_weights_only() {
        let cfg = tiny_config();
        let both = TaskModel::new(&cfg, &quick(Task::Segmentation, Arm::RandInit, vec![View::Sax, View::Lax4c], View::Lax4c), None, 0).unwrap();
        let lax = TaskModel::new(&cfg, &quick(Task::Segmentation, Arm::RandInit, vec![View::Lax4c], View::Lax4c), None, 0).unwrap();
        assert!(lax.num_params() < both.num_params());
        for id in both.store.ids() {
            let name = both.store.name(id);
            let block_weight = name.starts_with("enc.block") && name.ends_with(".w");
            assert_eq!(both.store.decays(id), block_weight, "{name}");
        }
    }

    #[test]
    fn identical_seeds_give_identical_weights() {
        let cfg = tiny_config();
        let studies = tiny_studies(3, 4);
        let mut ft = quick(Task::Segmentation, Arm::RandInit, vec![View::Lax4c], View::Lax4c);
        ft.train.epochs = 2;
        ft.train.augment = AugmentConfig::default();
        let a = finetune(&cfg, &ft, None, &studies[..2], &studies[2..], &mut |_| ()).unwrap();
        let b = finetune(&cfg, &ft, None, &studies[..2], &studies[2..], &mut |_| ()).unwrap();
        assert_eq!(a.losses, b.losses);
        for id in a.model.store.ids() {
            assert_eq!(a.model.store.value(id), b.model.store.value(id));
        }
        ft.train.seed = 1;
        let c = finetune(&cfg, &ft, None, &studies[..2], &studies[2..], &mut |_| ()).unwrap();
        assert_ne!(a.losses, c.losses);
    }

    #[test]
    fn short_run_restores_best_validated_weights() {
        let cfg = tiny_config();
        let studies = tiny_studies(3, 1);
        let ft = quick(Task::Segmentation, Arm::RandInit, vec![View::Lax4c], View::Lax4c);
        let mut lines = 0;
        let out = finetune(&cfg, &ft, None, &studies[..2], &studies[2..], &mut |_| lines += 1).unwrap();
        assert_eq!(out.losses.len(), 4 * 2);
        assert_eq!(lines, out.losses.len() + out.evals.len());
        let val = build_samples(&studies[2..], &out.model.config, &ft).unwrap();
        let (subjects, metric) = evaluate(&out.model, &val).unwrap();
        assert_eq!(subjects.len(), 1);
        assert_eq!(metric, out.best_metric);
        let best = out.evals.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, out.best_metric);
        assert!(out.losses.iter().all(|l| l.is_finite()));
        assert!(finetune(&cfg, &ft, None, &studies[..2], &[], &mut |_| ()).is_err());
    }

    #[test]
    fn sax_segmentation_reports_ejection_fraction_error() {
        let cfg = tiny_config();
        let studies = tiny_studies(1, 0);
        let ft = quick(Task::Segmentation, Arm::Unet, vec![View::Sax], View::Sax);
        let m = TaskModel::new(&cfg, &ft, None, 0).unwrap();
        let s = build_samples(&studies, &m.config, &ft).unwrap();
        let (r, _) = evaluate(&m, &s).unwrap();
        assert!(r[0].metrics.contains_key("dice_lv"));
        // an untrained net may predict no LV at all, in which case EF is undefined
        if let Some(e) = r[0].metrics.get("lvef_abs_err") {
            assert!(e.is_finite());
        }
    }
}
