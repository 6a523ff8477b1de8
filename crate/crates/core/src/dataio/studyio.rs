//! Conversion between [`CineStudy`] and CMRC containers, and study preprocessing.
//!
//! Arrays are stored as `<view>/image`, `<view>/mask` and `<view>/landmarks`.
//! Long-axis images are `[X, Y, T]` on disk and `[X, Y, 1, T]` in memory.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, Axis, Ix3, Ix4};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::container::{read_container, write_container, ArrayData, Container, ContainerError};
use super::{crop_or_pad, crop_pad_offset, normalize_intensity, resample, GridError, GridSpec};
use crate::study::{CineStudy, View, ViewData};

fn bad(msg: impl Into<String>) -> ContainerError {
    ContainerError::BadHeader(msg.into())
}

fn drop_depth<T: Clone>(a: &Array4<T>) -> ArrayD<T> {
    a.index_axis(Axis(2), 0).to_owned().into_dyn()
}

fn add_depth<T: Clone>(a: &ArrayD<T>) -> Result<Array4<T>, ContainerError> {
    let a3 = a.clone().into_dimensionality::<Ix3>().map_err(|e| bad(e.to_string()))?;
    Ok(a3.insert_axis(Axis(2)))
}

pub fn study_to_container(s: &CineStudy) -> Container {
    let mut c = Container::new();
    let mut spacing = serde_json::Map::new();
    for (view, d) in &s.views {
        let k = view.key();
        let image = if view.is_lax() { drop_depth(&d.image) } else { d.image.clone().into_dyn() };
        c.insert(format!("{k}/image"), ArrayData::F32(image));
        if let Some(m) = &d.mask {
            let m = if view.is_lax() { drop_depth(m) } else { m.clone().into_dyn() };
            c.insert(format!("{k}/mask"), ArrayData::U8(m));
        }
        if let Some(l) = &d.landmarks {
            c.insert(format!("{k}/landmarks"), ArrayData::F64(l.clone().into_dyn()));
        }
        spacing.insert(k.to_string(), json!(d.spacing));
    }
    c.meta = json!({
        "kind": "study",
        "id": s.id,
        "spacing": spacing,
        "gt_scalars": s.gt_scalars,
        "ed_phase": s.ed_phase,
        "es_phase": s.es_phase,
    });
    c
}

pub fn study_from_container(c: &Container) -> Result<CineStudy, ContainerError> {
    let meta = &c.meta;
    if meta.get("kind").and_then(|k| k.as_str()) != Some("study") {
        return Err(bad("container does not hold a study"));
    }
    let id = meta["id"].as_str().ok_or_else(|| bad("missing study id"))?.to_string();
    let gt_scalars: BTreeMap<String, f64> = serde_json::from_value(meta["gt_scalars"].clone()).map_err(|e| bad(e.to_string()))?;
    let phase = |k: &str| -> Result<Option<usize>, ContainerError> {
        serde_json::from_value(meta[k].clone()).map_err(|e| bad(e.to_string()))
    };
    let mut views = BTreeMap::new();
    for view in View::ALL {
        let k = view.key();
        let Some(image) = c.arrays.get(&format!("{k}/image")) else { continue };
        let image = image.as_f32().ok_or_else(|| bad(format!("{k}/image must be f32")))?;
        let spacing: [f64; 3] = serde_json::from_value(meta["spacing"][k].clone()).map_err(|e| bad(format!("{k} spacing: {e}")))?;
        let image = if view.is_lax() {
            add_depth(image)?
        } else {
            image.clone().into_dimensionality::<Ix4>().map_err(|e| bad(e.to_string()))?
        };
        let mask = match c.arrays.get(&format!("{k}/mask")) {
            Some(m) => {
                let m = m.as_u8().ok_or_else(|| bad(format!("{k}/mask must be u8")))?;
                Some(if view.is_lax() { add_depth(m)? } else { m.clone().into_dimensionality::<Ix4>().map_err(|e| bad(e.to_string()))? })
            }
            None => None,
        };
        let landmarks = match c.arrays.get(&format!("{k}/landmarks")) {
            Some(l) => Some(
                l.as_f64()
                    .ok_or_else(|| bad(format!("{k}/landmarks must be f64")))?
                    .clone()
                    .into_dimensionality::<Ix3>()
                    .map_err(|e| bad(e.to_string()))?,
            ),
            None => None,
        };
        views.insert(view, ViewData { image, spacing, mask, landmarks });
    }
    let study = CineStudy { id, views, gt_scalars, ed_phase: phase("ed_phase")?, es_phase: phase("es_phase")? };
    study.validate().map_err(bad)?;
    Ok(study)
}

pub fn write_study(study: &CineStudy, path: &Path) -> Result<(), ContainerError> {
    write_container(&study_to_container(study), path)
}

pub fn read_study(path: &Path) -> Result<CineStudy, ContainerError> {
    study_from_container(&read_container(path)?)
}

/// Target grids for short- and long-axis views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub sax: GridSpec,
    pub lax: GridSpec,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            sax: GridSpec { spacing: vec![1.5, 1.5, 10.0], size: vec![64, 64, 4] },
            lax: GridSpec { spacing: vec![1.5, 1.5], size: vec![64, 64] },
            normalize: true,
        }
    }
}

/// Resample every view to its target spacing, centre crop/pad to the target
/// size and normalise intensities per view. Masks use nearest neighbour;
/// landmarks follow the same index mapping.
pub fn preprocess_study(study: &CineStudy, cfg: &PreprocessConfig) -> Result<CineStudy, GridError> {
    cfg.sax.validate()?;
    cfg.lax.validate()?;
    if cfg.sax.spacing.len() != 3 {
        return Err(GridError::RankMismatch { spacing: cfg.sax.spacing.len(), ndim: 3 });
    }
    if cfg.lax.spacing.len() != 2 {
        return Err(GridError::RankMismatch { spacing: cfg.lax.spacing.len(), ndim: 2 });
    }
    let mut views = BTreeMap::new();
    for (&view, d) in &study.views {
        let (grid, n_ax) = if view.is_lax() { (&cfg.lax, 2) } else { (&cfg.sax, 3) };
        let sp_in = &d.spacing[..n_ax];
        let image = resample(d.image.view().into_dyn(), sp_in, &grid.spacing, false)?;
        let resampled_shape = image.shape().to_vec();
        let image = crop_or_pad(image.view(), &grid.size);
        let image = if cfg.normalize { normalize_intensity(image.view()) } else { image };
        let image = image.into_dimensionality::<Ix4>().expect("4-d image");
        let mask = match &d.mask {
            Some(m) => {
                let m = resample(m.view().into_dyn(), sp_in, &grid.spacing, true)?;
                Some(crop_or_pad(m.view(), &grid.size).into_dimensionality::<Ix4>().expect("4-d mask"))
            }
            None => None,
        };
        let landmarks = d.landmarks.as_ref().map(|l| {
            let mut out = Array3::<f64>::zeros(l.raw_dim());
            for ((t, p, a), v) in l.indexed_iter() {
                let (from, to) = (sp_in[a], grid.spacing[a]);
                let j = (v / from + 0.5) * from / to - 0.5;
                let j = j + crop_pad_offset(resampled_shape[a], grid.size[a]) as f64;
                out[[t, p, a]] = j * to;
            }
            out
        });
        let mut spacing = d.spacing;
        spacing[..n_ax].copy_from_slice(&grid.spacing);
        views.insert(view, ViewData { image, spacing, mask, landmarks });
    }
    Ok(CineStudy { views, ..study.clone() })
}
