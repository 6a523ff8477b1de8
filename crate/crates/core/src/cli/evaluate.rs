//! `eval`: per-subject metrics of saved predictions against ground-truth studies.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::ArrayView3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::pipeline::load_studies;
use super::run::{fmt_num, container_files, read_json, with_run, Run, RESULTS};
use super::{runtime, CliError, EvalArgs};
use crate::metrics::{
    classification_metrics, dice, ef, gls, hd95, landmark_error, lv_length, mapse, mask_volume, roc_auc,
    ConfusionCounts, Landmarks,
};
use crate::study::{label, CineStudy, View};
use crate::training::{read_prediction, StudyPrediction, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub id: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Contents of an evaluation's `results.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub arm: Option<String>,
    pub task: Task,
    pub view: View,
    /// Prediction sets, one per training seed.
    pub prediction_sets: Vec<String>,
    pub n_subjects: usize,
    /// Subject-level metrics averaged over prediction sets, then summarised over subjects.
    pub metrics: BTreeMap<String, Moments>,
    /// Cohort-level classification metrics, averaged over prediction sets.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub cohort: BTreeMap<String, f64>,
    pub subjects: Vec<SubjectMetrics>,
}

const CLASSES: [(&str, u8); 3] = [("rv", label::RV), ("myo", label::MYO), ("lv", label::LV)];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn moments(v: &[f64]) -> Moments {
    let m = mean(v);
    let std = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt() } else { 0.0 };
    Moments { mean: m, std, n: v.len() }
}

fn gt_landmarks(s: &CineStudy, view: View, phase: usize) -> Result<Landmarks, CliError> {
    let l = s
        .view(view)
        .and_then(|d| d.landmarks.as_ref())
        .ok_or_else(|| runtime(format!("study {}: no {view} landmarks", s.id)))?;
    if phase >= l.shape()[0] {
        return Err(runtime(format!("study {}: phase {phase} out of range", s.id)));
    }
    Ok([[l[[phase, 0, 0]], l[[phase, 0, 1]]], [l[[phase, 1, 0]], l[[phase, 1, 1]]], [l[[phase, 2, 0]], l[[phase, 2, 1]]]])
}

fn lv_volume(m: ArrayView3<u8>, spacing: [f64; 3]) -> f64 {
    mask_volume(m, label::LV, spacing).expect("valid label")
}

/// Metrics of one study's predictions. Boundary distances are left out for
/// classes absent from either mask.
pub fn score_prediction(p: &StudyPrediction, s: &CineStudy) -> Result<BTreeMap<String, f64>, CliError> {
    let mut m = BTreeMap::new();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    match p.task {
        Task::Segmentation => {
            let data = s.view(p.view).ok_or_else(|| runtime(format!("study {}: no {} view", s.id, p.view)))?;
            let mut volumes = Vec::new();
            for (&phase, pm) in p.phases.iter().zip(&p.masks) {
                let gm = data.mask_phase(phase).ok_or_else(|| runtime(format!("study {}: no {} mask", s.id, p.view)))?;
                if gm.shape() != pm.shape() {
                    return Err(runtime(format!(
                        "study {}: predicted mask {:?} vs ground truth {:?}",
                        s.id,
                        pm.shape(),
                        gm.shape()
                    )));
                }
                let mut sum = 0.0;
                for (name, l) in CLASSES {
                    let d = dice(pm.view().into_dyn(), gm.into_dyn(), l).map_err(runtime)?;
                    sum += d;
                    acc.entry(format!("dice_{name}")).or_default().push(d);
                    if let Ok(h) = hd95(pm.view().into_dyn(), gm.into_dyn(), l, &data.spacing) {
                        acc.entry(format!("hd95_{name}")).or_default().push(h);
                    }
                }
                acc.entry("dice".into()).or_default().push(sum / 3.0);
                volumes.push((lv_volume(pm.view(), data.spacing), lv_volume(gm, data.spacing)));
            }
            if p.view == View::Sax && volumes.len() == 2 {
                if let (Ok(pe), Ok(ge)) = (ef(volumes[0].0, volumes[1].0), ef(volumes[0].1, volumes[1].1)) {
                    m.insert("lvef_pred".into(), pe);
                    m.insert("lvef_gt".into(), ge);
                    m.insert("lvef_abs_err".into(), (pe - ge).abs());
                }
            }
        }
        Task::LandmarkHeatmap | Task::LandmarkCoord => {
            let mut gts = Vec::new();
            for (&phase, pl) in p.phases.iter().zip(&p.landmarks) {
                let gl = gt_landmarks(s, p.view, phase)?;
                acc.entry("l2".into()).or_default().push(landmark_error(pl, &gl));
                gts.push(gl);
            }
            if p.landmarks.len() == 2 {
                let (mp, mg) = (mapse(&p.landmarks[0], &p.landmarks[1]), mapse(&gts[0], &gts[1]));
                m.insert("mapse_pred".into(), mp);
                m.insert("mapse_gt".into(), mg);
                m.insert("mapse_abs_err".into(), (mp - mg).abs());
                let g = |l: &[Landmarks]| gls(lv_length(&l[0]), lv_length(&l[1]));
                if let (Ok(gp), Ok(gg)) = (g(&p.landmarks), g(&gts)) {
                    m.insert("gls_pred".into(), gp);
                    m.insert("gls_gt".into(), gg);
                    m.insert("gls_abs_err".into(), (gp - gg).abs());
                }
            }
        }
        Task::Regression | Task::Classification => {
            let key = p.target_key.as_deref().ok_or_else(|| runtime(format!("prediction {} has no target key", p.study)))?;
            let target = *s
                .gt_scalars
                .get(key)
                .ok_or_else(|| runtime(format!("study {}: no ground-truth scalar {key}", s.id)))?;
            m.insert("target".into(), target);
            if let Some(v) = p.value {
                m.insert("prediction".into(), v);
                m.insert("abs_err".into(), (v - target).abs());
            }
            if let (Some(c), Some(score)) = (p.class, p.score) {
                m.insert("label".into(), c as f64);
                m.insert("score".into(), score);
                m.insert("correct".into(), ((c != 0) == (target != 0.0)) as u8 as f64);
            }
        }
        Task::Pretrain => return Err(runtime("pre-training has no predictions to evaluate")),
    }
    for (k, v) in acc {
        m.insert(k, mean(&v));
    }
    Ok(m)
}

/// AUC, sensitivity, specificity and MCC of one prediction set.
fn cohort_metrics(subjects: &BTreeMap<String, BTreeMap<String, f64>>) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let rows: Vec<_> = subjects.values().filter(|m| m.contains_key("score")).collect();
    let truth: Vec<bool> = rows.iter().map(|m| m["target"] != 0.0).collect();
    let pred: Vec<bool> = rows.iter().map(|m| m["label"] != 0.0).collect();
    let scores: Vec<f64> = rows.iter().map(|m| m["score"]).collect();
    if let Ok(auc) = roc_auc(&scores, &truth) {
        out.insert("auc".into(), auc);
    }
    if let Ok(c) = classification_metrics(&ConfusionCounts::from_predictions(&pred, &truth)) {
        out.insert("sensitivity".into(), c.sensitivity);
        out.insert("specificity".into(), c.specificity);
        out.insert("mcc".into(), c.mcc);
    }
    out
}

/// Prediction sets under `pred`: `seed*/predictions` of a fine-tuning run, a
/// `predictions` directory, or `pred` itself.
fn prediction_sets(pred: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut sets = Vec::new();
    if let Ok(entries) = std::fs::read_dir(pred) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            let dir = e.path().join("predictions");
            if name.starts_with("seed") && dir.is_dir() {
                sets.push((name, dir));
            }
        }
    }
    sets.sort();
    if sets.is_empty() {
        let dir = pred.join("predictions");
        let dir = if dir.is_dir() { dir } else { pred.to_path_buf() };
        if !container_files(&dir)?.is_empty() {
            sets.push(("predictions".into(), dir));
        }
    }
    if sets.is_empty() {
        return Err(runtime(format!("{} holds no predictions", pred.display())));
    }
    Ok(sets)
}

fn subjects_csv(subjects: &[SubjectMetrics]) -> Result<String, CliError> {
    let columns: BTreeSet<&String> = subjects.iter().flat_map(|s| s.metrics.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = std::iter::once("id").chain(columns.iter().map(|c| c.as_str())).collect();
    w.write_record(&header).map_err(runtime)?;
    for s in subjects {
        let mut row = vec![s.id.clone()];
        row.extend(columns.iter().map(|c| s.metrics.get(*c).map(|v| fmt_num(*v)).unwrap_or_default()));
        w.write_record(&row).map_err(runtime)?;
    }
    String::from_utf8(w.into_inner().map_err(runtime)?).map_err(runtime)
}

pub fn eval(a: &EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let config = json!({"pred": a.pred, "gt": a.gt});
    let run = Run::start(&a.out, "eval", argv, config, vec![], &[&a.pred, &a.gt])?;
    with_run(run, |run| {
        let arm = match a.pred.join(RESULTS) {
            p if p.is_file() => read_json::<Value>(&p)?.get("arm").and_then(|v| v.as_str()).map(str::to_string),
            _ => None,
        };
        let studies: BTreeMap<String, CineStudy> = load_studies(&a.gt)?.into_iter().map(|s| (s.id.clone(), s)).collect();
        let sets = prediction_sets(&a.pred)?;
        let mut per_set: Vec<BTreeMap<String, BTreeMap<String, f64>>> = Vec::new();
        let mut kind: Option<(Task, View)> = None;
        for (name, dir) in &sets {
            let mut subjects = BTreeMap::new();
            for f in container_files(dir)? {
                let p = read_prediction(&f).map_err(|e| runtime(format!("{}: {e}", f.display())))?;
                match kind {
                    None => kind = Some((p.task, p.view)),
                    Some(k) if k != (p.task, p.view) => {
                        return Err(runtime(format!("{}: predictions mix tasks or views", f.display())))
                    }
                    _ => {}
                }
                let s = studies.get(&p.study).ok_or_else(|| runtime(format!("no ground truth for study {}", p.study)))?;
                subjects.insert(p.study.clone(), score_prediction(&p, s)?);
            }
            if let Some(first) = per_set.first() {
                if !first.keys().eq(subjects.keys()) {
                    return Err(runtime(format!("prediction set {name} covers different subjects")));
                }
            }
            per_set.push(subjects);
        }
        let (task, view) = kind.ok_or_else(|| runtime("no predictions found"))?;
        let mut subjects = Vec::new();
        for id in per_set[0].keys() {
            let mut vals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for set in &per_set {
                for (k, v) in &set[id] {
                    vals.entry(k.clone()).or_default().push(*v);
                }
            }
            let metrics = vals.into_iter().map(|(k, v)| (k, mean(&v))).collect();
            subjects.push(SubjectMetrics { id: id.clone(), metrics });
        }
        let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &subjects {
            for (k, v) in &s.metrics {
                by_metric.entry(k.clone()).or_default().push(*v);
            }
        }
        let mut cohort: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for set in &per_set {
            for (k, v) in cohort_metrics(set) {
                cohort.entry(k).or_default().push(v);
            }
        }
        let results = EvalResults {
            arm,
            task,
            view,
            prediction_sets: sets.iter().map(|s| s.0.clone()).collect(),
            n_subjects: subjects.len(),
            metrics: by_metric.iter().map(|(k, v)| (k.clone(), moments(v))).collect(),
            cohort: cohort.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
            subjects,
        };
        run.write_text("subjects.csv", &subjects_csv(&results.subjects)?)?;
        serde_json::to_value(&results).map_err(runtime)
    })
}

/// Perfect-prediction helper for tests: ground-truth masks of the given phases.
#[cfg(test)]
pub(crate) fn oracle_prediction(s: &CineStudy, view: View, phases: &[usize]) -> StudyPrediction {
    let d = s.view(view).unwrap();
    StudyPrediction {
        study: s.id.clone(),
        task: Task::Segmentation,
        view,
        phases: phases.to_vec(),
        masks: phases.iter().map(|&t| d.mask_phase(t).unwrap().to_owned()).collect::<Vec<ndarray::Array3<u8>>>(),
        landmarks: Vec::new(),
        target_key: None,
        value: None,
        class: None,
        score: None,
    }
}
