//! Cardiac function quantities and evaluation metrics.
//!
//! Landmark sets are `[valve1, valve2, apex]` points in mm. Percentiles use
//! linear interpolation between order statistics everywhere in the crate.

use ndarray::{ArrayD, ArrayView3, ArrayViewD, Axis, Dimension, IxDyn};
use thiserror::Error;

use crate::study::label;

/// Three 2-D landmark points in mm: valve 1, valve 2, apex.
pub type Landmarks = [[f64; 2]; 3];

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("unknown label {0}")]
    UnknownLabel(u8),
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("label {label} is empty in {which}")]
    EmptyRegion { label: u8, which: &'static str },
    #[error("need both positive and negative examples")]
    SingleClass,
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

fn check_label(l: u8) -> Result<(), MetricError> {
    if (l as usize) < label::N_CLASSES {
        Ok(())
    } else {
        Err(MetricError::UnknownLabel(l))
    }
}

/// Volume in ml of the voxels carrying `label`.
pub fn mask_volume(mask: ArrayView3<u8>, l: u8, spacing: [f64; 3]) -> Result<f64, MetricError> {
    check_label(l)?;
    for &s in &spacing {
        if !(s > 0.0) {
            return Err(MetricError::NonPositive { what: "spacing", value: s });
        }
    }
    let n = mask.iter().filter(|&&v| v == l).count();
    Ok(n as f64 * spacing.iter().product::<f64>() / 1000.0)
}

/// Ejection fraction in percent.
pub fn ef(edv: f64, esv: f64) -> Result<f64, MetricError> {
    if !(edv > 0.0) {
        return Err(MetricError::NonPositive { what: "EDV", value: edv });
    }
    Ok((edv - esv) / edv * 100.0)
}

/// Per-phase chamber volumes in ml.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSeries {
    pub lv: Vec<f64>,
    pub rv: Vec<f64>,
    pub myo: Vec<f64>,
    pub spacing: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chamber {
    Lv,
    Rv,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesEf {
    pub ef: f64,
    pub ed_phase: usize,
    pub es_phase: usize,
}

impl VolumeSeries {
    /// Volumes from a `[X, Y, Z, T]` label array.
    pub fn from_masks(masks: ndarray::ArrayView4<u8>, spacing: [f64; 3]) -> Result<Self, MetricError> {
        let mut s = Self { lv: vec![], rv: vec![], myo: vec![], spacing };
        for m in masks.axis_iter(Axis(3)) {
            s.lv.push(mask_volume(m, label::LV, spacing)?);
            s.rv.push(mask_volume(m, label::RV, spacing)?);
            s.myo.push(mask_volume(m, label::MYO, spacing)?);
        }
        Ok(s)
    }

    pub fn chamber(&self, c: Chamber) -> &[f64] {
        match c {
            Chamber::Lv => &self.lv,
            Chamber::Rv => &self.rv,
        }
    }
}

/// EF from the maximum (ED) and minimum (ES) volume of a series.
/// Ties go to the earliest phase.
pub fn ef_from_series(volumes: &[f64]) -> Result<SeriesEf, MetricError> {
    if volumes.len() < 2 {
        return Err(MetricError::TooFew { need: 2, got: volumes.len() });
    }
    let mut ed = 0;
    let mut es = 0;
    for (i, &v) in volumes.iter().enumerate() {
        if v > volumes[ed] {
            ed = i;
        }
        if v < volumes[es] {
            es = i;
        }
    }
    Ok(SeriesEf { ef: ef(volumes[ed], volumes[es])?, ed_phase: ed, es_phase: es })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Mean displacement of the two valve landmarks between ED and ES.
pub fn mapse(ed: &Landmarks, es: &Landmarks) -> f64 {
    (dist(ed[0], es[0]) + dist(ed[1], es[1])) / 2.0
}

/// Distance from the valve midpoint to the apex.
pub fn lv_length(lms: &Landmarks) -> f64 {
    let mid = [(lms[0][0] + lms[1][0]) / 2.0, (lms[0][1] + lms[1][1]) / 2.0];
    dist(mid, lms[2])
}

/// Global longitudinal shortening in percent.
pub fn gls(len_ed: f64, len_es: f64) -> Result<f64, MetricError> {
    if !(len_ed > 0.0) {
        return Err(MetricError::NonPositive { what: "ED length", value: len_ed });
    }
    Ok((len_ed - len_es) / len_ed * 100.0)
}

/// Mean Euclidean distance between corresponding landmarks.
pub fn landmark_error(pred: &Landmarks, gt: &Landmarks) -> f64 {
    (0..3).map(|i| dist(pred[i], gt[i])).sum::<f64>() / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedLandmarks {
    pub points: Landmarks,
    /// Channels whose map is constant; the point is then the tie-broken first pixel.
    pub low_confidence: [bool; 3],
}

/// Argmax decoding of `[3, X, Y]` heatmaps to mm coordinates (`index * spacing`).
/// Ties resolve to the lowest row-major index.
pub fn heatmap_to_landmarks(maps: ArrayView3<f64>, spacing: [f64; 2]) -> DecodedLandmarks {
    let mut out = DecodedLandmarks { points: [[0.0; 2]; 3], low_confidence: [false; 3] };
    for (c, m) in maps.axis_iter(Axis(0)).enumerate().take(3) {
        let mut best = (0usize, 0usize);
        let mut best_v = f64::NEG_INFINITY;
        let mut min_v = f64::INFINITY;
        for ((i, j), &v) in m.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
            min_v = min_v.min(v);
        }
        out.points[c] = [best.0 as f64 * spacing[0], best.1 as f64 * spacing[1]];
        out.low_confidence[c] = best_v == min_v;
    }
    out
}

fn same_shape(a: &ArrayViewD<u8>, b: &ArrayViewD<u8>) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Dice overlap of `label`; two empty regions score 1.
pub fn dice(a: ArrayViewD<u8>, b: ArrayViewD<u8>, l: u8) -> Result<f64, MetricError> {
    same_shape(&a, &b)?;
    check_label(l)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (ia, ib) = (x == l, y == l);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Voxels of the region that have a face neighbour outside it (the array
/// border counts as outside).
pub fn boundary(region: &ArrayD<bool>) -> ArrayD<bool> {
    let shape = region.shape().to_vec();
    let mut out = ArrayD::from_elem(IxDyn(&shape), false);
    for (idx, &inside) in region.indexed_iter() {
        if !inside {
            continue;
        }
        let mut nb = idx.as_array_view().to_vec();
        let mut edge = false;
        for d in 0..shape.len() {
            let c = nb[d];
            if c == 0 || c + 1 == shape[d] {
                edge = true;
                break;
            }
            nb[d] = c - 1;
            let lo = region[IxDyn(&nb)];
            nb[d] = c + 1;
            let hi = region[IxDyn(&nb)];
            nb[d] = c;
            if !lo || !hi {
                edge = true;
                break;
            }
        }
        out[idx] = edge;
    }
    out
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest `true` site,
/// computed exactly by separable lower envelopes of parabolas.
pub fn squared_distance_transform(sites: &ArrayD<bool>, spacing: &[f64]) -> ArrayD<f64> {
    let mut f = sites.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    for (d, &sp) in spacing.iter().enumerate().take(f.ndim()) {
        let mut buf = Vec::new();
        for mut lane in f.lanes_mut(Axis(d)) {
            buf.clear();
            buf.extend(lane.iter().copied());
            let out = envelope_1d(&buf, sp);
            for (dst, v) in lane.iter_mut().zip(out) {
                *dst = v;
            }
        }
    }
    f
}

fn envelope_1d(f: &[f64], sp: f64) -> Vec<f64> {
    let n = f.len();
    let pts: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if pts.is_empty() {
        return vec![f64::INFINITY; n];
    }
    let x = |i: usize| i as f64 * sp;
    let mut v = vec![pts[0]];
    let mut z = vec![f64::NEG_INFINITY, f64::INFINITY];
    for &q in &pts[1..] {
        loop {
            let p = *v.last().expect("envelope non-empty");
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
                *z.last_mut().expect("sentinel") = f64::INFINITY;
                continue;
            }
            let k = v.len();
            z[k] = s;
            z.push(f64::INFINITY);
            v.push(q);
            break;
        }
    }
    let mut k = 0;
    (0..n)
        .map(|q| {
            while z[k + 1] < x(q) {
                k += 1;
            }
            (x(q) - x(v[k])).powi(2) + f[v[k]]
        })
        .collect()
}

/// 95th percentile of the pooled boundary-to-boundary nearest distances (mm).
pub fn hd95(a: ArrayViewD<u8>, b: ArrayViewD<u8>, l: u8, spacing: &[f64]) -> Result<f64, MetricError> {
    same_shape(&a, &b)?;
    check_label(l)?;
    if spacing.len() != a.ndim() {
        return Err(MetricError::ShapeMismatch(vec![spacing.len()], vec![a.ndim()]));
    }
    let ra = a.mapv(|v| v == l);
    let rb = b.mapv(|v| v == l);
    if !ra.iter().any(|&v| v) {
        return Err(MetricError::EmptyRegion { label: l, which: "first mask" });
    }
    if !rb.iter().any(|&v| v) {
        return Err(MetricError::EmptyRegion { label: l, which: "second mask" });
    }
    let (ba, bb) = (boundary(&ra), boundary(&rb));
    let (da, db) = (squared_distance_transform(&ba, spacing), squared_distance_transform(&bb, spacing));
    let mut d = Vec::new();
    for ((&in_a, &in_b), (&to_a, &to_b)) in ba.iter().zip(bb.iter()).zip(da.iter().zip(db.iter())) {
        if in_a {
            d.push(to_b.sqrt());
        }
        if in_b {
            d.push(to_a.sqrt());
        }
    }
    Ok(percentile(&d, 95.0).expect("non-empty boundaries"))
}

/// Within-subject coefficient of variation of repeated pairs, in percent.
pub fn coefficient_of_variation(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let mut acc = 0.0;
    for &(x1, x2) in pairs {
        let m = (x1 + x2) / 2.0;
        if !(m > 0.0) {
            return Err(MetricError::NonPositive { what: "pair mean", value: m });
        }
        acc += (x1 - x2).powi(2) / (2.0 * m * m);
    }
    Ok((acc / pairs.len() as f64).sqrt() * 100.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// TP / (TP + FN), if any positives exist.
    pub fn sensitivity(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    /// TN / (TN + FP), if any negatives exist.
    pub fn specificity(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }
}

/// Binary metrics as fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassificationMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub mcc: f64,
}

/// Requires at least one positive and one negative ground-truth case.
/// A zero MCC denominator (constant predictions) gives MCC 0.
pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics, MetricError> {
    let (sensitivity, specificity) = match (c.sensitivity(), c.specificity()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(MetricError::SingleClass),
    };
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den };
    Ok(ClassificationMetrics { sensitivity, specificity, f1, mcc })
}

/// Average ranks (1-based) with ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// ROC AUC via the Mann-Whitney rank statistic.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::ShapeMismatch(vec![scores.len()], vec![labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
