use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::finetune::{build_samples, FinetuneConfig, Prediction, TaskModel};
use super::{Task, TrainError};
use crate::backbone::labels_from_model_layout;
use crate::dataio::{read_container, write_container, ArrayData, Container, ContainerError};
use crate::metrics::Landmarks;
use crate::study::{CineStudy, View};

/// Predictions of one study, in study layout and mm.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyPrediction {
    pub study: String,
    pub task: Task,
    pub view: View,
    /// Phases of the per-phase predictions (ED then ES).
    pub phases: Vec<usize>,
    /// `[X, Y, Z]` label maps, one per phase.
    pub masks: Vec<Array3<u8>>,
    /// Landmarks in mm, one set per phase.
    pub landmarks: Vec<Landmarks>,
    pub target_key: Option<String>,
    pub value: Option<f64>,
    pub class: Option<usize>,
    pub score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct PredictionMeta {
    kind: String,
    study: String,
    task: Task,
    view: View,
    phases: Vec<usize>,
    target_key: Option<String>,
    value: Option<f64>,
    class: Option<usize>,
    score: Option<f64>,
}

/// Predict every phase the task covers for one study.
pub fn predict_study(model: &TaskModel, ft: &FinetuneConfig, study: &CineStudy) -> Result<StudyPrediction, TrainError> {
    let samples = build_samples(std::slice::from_ref(study), &model.config, ft)?;
    let spacing = study.view(ft.target_view).map(|d| d.spacing).unwrap_or([1.0; 3]);
    let mut out = StudyPrediction {
        study: study.id.clone(),
        task: model.task,
        view: ft.target_view,
        phases: Vec::new(),
        masks: Vec::new(),
        landmarks: Vec::new(),
        target_key: ft.target_key.clone(),
        value: None,
        class: None,
        score: None,
    };
    for s in &samples {
        match model.predict(s)? {
            Prediction::Mask(m) => {
                out.phases.push(s.frames[0].phase);
                out.masks.push(labels_from_model_layout(&m));
            }
            Prediction::Landmarks(l) => {
                out.phases.push(s.frames[0].phase);
                out.landmarks.push(l.map(|p| [p[0] * spacing[0], p[1] * spacing[1]]));
            }
            Prediction::Scalar(v) => out.value = Some(v),
            Prediction::Class { label, score } => {
                out.class = Some(label);
                out.score = Some(score);
            }
        }
    }
    Ok(out)
}

pub fn write_prediction(p: &StudyPrediction, path: &Path) -> Result<(), ContainerError> {
    let mut c = Container::new();
    if !p.masks.is_empty() {
        let views: Vec<_> = p.masks.iter().map(|m| m.view().insert_axis(Axis(3))).collect();
        let stacked: Array4<u8> = ndarray::concatenate(Axis(3), &views).expect("same grid");
        c.insert("mask", ArrayData::U8(stacked.into_dyn()));
    }
    if !p.landmarks.is_empty() {
        let flat: Vec<f64> = p.landmarks.iter().flatten().flatten().copied().collect();
        c.insert("landmarks", ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&[p.landmarks.len(), 3, 2]), flat).expect("layout")));
    }
    c.meta = json!(PredictionMeta {
        kind: "prediction".into(),
        study: p.study.clone(),
        task: p.task,
        view: p.view,
        phases: p.phases.clone(),
        target_key: p.target_key.clone(),
        value: p.value,
        class: p.class,
        score: p.score,
    });
    write_container(&c, path)
}

pub fn read_prediction(path: &Path) -> Result<StudyPrediction, ContainerError> {
    let c = read_container(path)?;
    let bad = |m: String| ContainerError::BadHeader(m);
    let meta: PredictionMeta = serde_json::from_value(c.meta.clone()).map_err(|e| bad(e.to_string()))?;
    if meta.kind != "prediction" {
        return Err(bad(format!("container kind {} is not prediction", meta.kind)));
    }
    let masks = match c.arrays.get("mask") {
        Some(_) => {
            let m = c.u8("mask")?;
            if m.ndim() != 4 || m.shape()[3] != meta.phases.len() {
                return Err(bad(format!("mask shape {:?} does not match {} phases", m.shape(), meta.phases.len())));
            }
            m.axis_iter(Axis(3)).map(|a| a.to_owned().into_dimensionality().expect("3-d")).collect()
        }
        None => Vec::new(),
    };
    let landmarks = match c.arrays.get("landmarks") {
        Some(_) => {
            let l = c.f64("landmarks")?;
            if l.shape() != [meta.phases.len(), 3, 2] {
                return Err(bad(format!("landmark shape {:?}", l.shape())));
            }
            (0..meta.phases.len())
                .map(|t| [[l[[t, 0, 0]], l[[t, 0, 1]]], [l[[t, 1, 0]], l[[t, 1, 1]]], [l[[t, 2, 0]], l[[t, 2, 1]]]])
                .collect()
        }
        None => Vec::new(),
    };
    Ok(StudyPrediction {
        study: meta.study,
        task: meta.task,
        view: meta.view,
        phases: meta.phases,
        masks,
        landmarks,
        target_key: meta.target_key,
        value: meta.value,
        class: meta.class,
        score: meta.score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::fixtures::{tiny_config, tiny_studies};
    use crate::training::Arm;

    #[test]
    fn prediction_round_trip() {
        let cfg = tiny_config();
        let studies = tiny_studies(1, 0);
        for (task, arm) in [(Task::Segmentation, Arm::Unet), (Task::LandmarkCoord, Arm::RandInit)] {
            let mut ft = FinetuneConfig::new(task, arm, vec![View::Lax4c], View::Lax4c);
            ft.unet_widths = vec![4, 8];
            ft.head_widths = Some([4, 4, 4, 4]);
            let model = TaskModel::new(&cfg, &ft, None, 0).unwrap();
            let p = predict_study(&model, &ft, &studies[0]).unwrap();
            assert_eq!(p.phases, vec![0, 2]);
            if task == Task::Segmentation {
                assert_eq!(p.masks[0].shape(), &[32, 32, 1]);
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.cmrc");
            write_prediction(&p, &path).unwrap();
            assert_eq!(read_prediction(&path).unwrap(), p);
        }
    }
}
