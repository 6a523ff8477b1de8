//! In-memory representation of one subject's multi-view cine study.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

/// The four cine views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Sax,
    Lax2c,
    Lax3c,
    Lax4c,
}

impl View {
    pub const ALL: [View; 4] = [View::Sax, View::Lax2c, View::Lax3c, View::Lax4c];
    pub const LAX: [View; 3] = [View::Lax2c, View::Lax3c, View::Lax4c];

    pub fn key(self) -> &'static str {
        match self {
            View::Sax => "sax",
            View::Lax2c => "lax_2c",
            View::Lax3c => "lax_3c",
            View::Lax4c => "lax_4c",
        }
    }

    pub fn is_lax(self) -> bool {
        self != View::Sax
    }

    /// In-plane angle of a long-axis view plane about the LV long axis.
    pub fn lax_angle_deg(self) -> Option<f64> {
        match self {
            View::Sax => None,
            View::Lax2c => Some(0.0),
            View::Lax3c => Some(60.0),
            View::Lax4c => Some(120.0),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for View {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sax" => Ok(View::Sax),
            "lax_2c" | "lax2c" => Ok(View::Lax2c),
            "lax_3c" | "lax3c" => Ok(View::Lax3c),
            "lax_4c" | "lax4c" => Ok(View::Lax4c),
            other => Err(format!("unknown view {other:?}")),
        }
    }
}

/// Segmentation labels.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const RV: u8 = 1;
    pub const MYO: u8 = 2;
    pub const LV: u8 = 3;
    pub const N_CLASSES: usize = 4;
}

/// One view of a study. Images are `[X, Y, Z, T]`; long-axis views have `Z = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub image: Array4<f32>,
    /// Voxel spacing in mm along X, Y, Z (Z is nominal for long-axis views).
    pub spacing: [f64; 3],
    /// Label map with the same shape as `image`.
    pub mask: Option<Array4<u8>>,
    /// `[T, 3, 2]` landmark coordinates in mm (valve 1, valve 2, apex), long-axis only.
    pub landmarks: Option<Array3<f64>>,
}

impl ViewData {
    pub fn n_phases(&self) -> usize {
        self.image.shape()[3]
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[0], s[1], s[2]]
    }

    /// `[X, Y, Z]` image at phase `t`.
    pub fn phase(&self, t: usize) -> ArrayView3<'_, f32> {
        self.image.index_axis(Axis(3), t)
    }

    pub fn mask_phase(&self, t: usize) -> Option<ArrayView3<'_, u8>> {
        self.mask.as_ref().map(|m| m.index_axis(Axis(3), t))
    }
}

/// One subject's multi-view study with optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct CineStudy {
    pub id: String,
    pub views: BTreeMap<View, ViewData>,
    /// Named ground-truth scalars such as `ef`, `mapse`, `gls`.
    pub gt_scalars: BTreeMap<String, f64>,
    /// Index of the end-diastolic and end-systolic phases when known.
    pub ed_phase: Option<usize>,
    pub es_phase: Option<usize>,
}

impl CineStudy {
    pub fn view(&self, v: View) -> Option<&ViewData> {
        self.views.get(&v)
    }

    pub fn n_phases(&self) -> usize {
        self.views.values().map(|v| v.n_phases()).min().unwrap_or(0)
    }

    /// Checks that intensities are finite, spacings positive and labels valid.
    pub fn validate(&self) -> Result<(), String> {
        for (view, data) in &self.views {
            if data.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(format!("{view}: non-positive spacing {:?}", data.spacing));
            }
            if data.image.iter().any(|v| !v.is_finite()) {
                return Err(format!("{view}: non-finite intensity"));
            }
            if let Some(m) = &data.mask {
                if m.shape() != data.image.shape() {
                    return Err(format!("{view}: mask shape {:?} != image {:?}", m.shape(), data.image.shape()));
                }
                if m.iter().any(|&l| l as usize >= label::N_CLASSES) {
                    return Err(format!("{view}: label outside 0..=3"));
                }
            }
            if let Some(l) = &data.landmarks {
                if l.shape() != [data.n_phases(), 3, 2] {
                    return Err(format!("{view}: landmark array shape {:?}", l.shape()));
                }
            }
        }
        Ok(())
    }
}
