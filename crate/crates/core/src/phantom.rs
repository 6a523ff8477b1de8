//! Synthetic multi-view cine phantom with analytic ground truth.
//!
//! The left ventricle is a blood-pool ellipsoid wrapped in a myocardial shell
//! of constant semi-axis offset; the right ventricle is a second ellipsoid
//! clipped by the LV epicardium. All semi-axes scale by a per-phase factor
//! `s(t) = 1 - (1 - contraction) * p(t)` with `p(t) = (1 - cos(2 pi t / T)) / 2`,
//! so `t = 0` is end-diastole and `t = T / 2` end-systole.
//!
//! World coordinates are in mm with the LV long axis along `+z` (apex to
//! base). Long-axis planes contain the long axis at 0, 60 and 120 degrees for
//! the 2-, 3- and 4-chamber views. The RV centre sits along the 4-chamber
//! direction.
//!
//! The mitral annulus is where the base plane meets the endocardium. The LV
//! centre is placed below the base plane so that the annulus radius stays
//! fixed over the cycle; valve landmarks then move purely along the long
//! axis and MAPSE equals the base-plane excursion exactly.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::study::{label, CineStudy, View, ViewData};

pub const BLOOD_INTENSITY: f32 = 0.9;
pub const MYO_INTENSITY: f32 = 0.5;
pub const BACKGROUND_INTENSITY: f32 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom parameter: {0}")]
    InvalidParams(String),
    #[error("{view}: non-positive spacing {spacing:?}")]
    NonPositiveSpacing { view: View, spacing: Vec<f64> },
    #[error("{view}: grid too small on axis {axis}: need at least {required} voxels, got {actual}")]
    GridTooSmall { view: View, axis: usize, required: usize, actual: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    /// End-diastolic LV blood-pool semi-axes (a, b, c) in mm; `c` is the long axis.
    pub lv_semi_axes_ed: [f64; 3],
    /// End-systolic scale of the semi-axes, in (0, 1).
    pub contraction: f64,
    /// Myocardial shell thickness in mm.
    pub wall_thickness: f64,
    /// Distance of the RV centre from the LV long axis in mm.
    pub rv_offset: f64,
    pub base_plane_z_ed: f64,
    pub base_plane_z_es: f64,
    pub n_phases: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_sax_size")]
    pub sax_size: [usize; 3],
    #[serde(default = "default_sax_spacing")]
    pub sax_spacing: [f64; 3],
    #[serde(default = "default_lax_size")]
    pub lax_size: [usize; 2],
    #[serde(default = "default_lax_spacing")]
    pub lax_spacing: [f64; 2],
    /// Annulus radius as a fraction of the end-systolic endocardial radius.
    #[serde(default = "default_annulus_fraction")]
    pub annulus_fraction: f64,
}

fn default_sax_size() -> [usize; 3] {
    [64, 64, 8]
}
fn default_sax_spacing() -> [f64; 3] {
    [1.5, 1.5, 10.0]
}
fn default_lax_size() -> [usize; 2] {
    [64, 64]
}
fn default_lax_spacing() -> [f64; 2] {
    [1.5, 1.5]
}
fn default_annulus_fraction() -> f64 {
    0.9
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            lv_semi_axes_ed: [14.0, 14.0, 26.0],
            contraction: 0.8,
            wall_thickness: 6.0,
            rv_offset: 18.0,
            base_plane_z_ed: 20.0,
            base_plane_z_es: 10.0,
            n_phases: 10,
            noise_sigma: 0.02,
            seed: 0,
            sax_size: default_sax_size(),
            sax_spacing: default_sax_spacing(),
            lax_size: default_lax_size(),
            lax_spacing: default_lax_spacing(),
            annulus_fraction: default_annulus_fraction(),
        }
    }
}

/// Shape state of the heart at one phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseGeometry {
    /// Semi-axis scale factor.
    pub scale: f64,
    /// Base plane height.
    pub base_z: f64,
    /// LV centre height.
    pub center_z: f64,
}

/// Closed-form reference values for a parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub edv_ml: f64,
    pub esv_ml: f64,
    pub ef: f64,
    pub mapse: f64,
    pub lv_length_ed: f64,
    pub lv_length_es: f64,
    pub gls: f64,
    pub ed_phase: usize,
    pub es_phase: usize,
}

impl GroundTruth {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("edv_ml".to_string(), self.edv_ml),
            ("esv_ml".to_string(), self.esv_ml),
            ("ef".to_string(), self.ef),
            ("mapse".to_string(), self.mapse),
            ("lv_length_ed".to_string(), self.lv_length_ed),
            ("lv_length_es".to_string(), self.lv_length_es),
            ("gls".to_string(), self.gls),
        ])
    }
}

/// Cycle profile: 0 at end-diastole, 1 at mid-cycle.
pub fn cycle_profile(t: usize, n_phases: usize) -> f64 {
    (1.0 - (2.0 * PI * t as f64 / n_phases as f64).cos()) / 2.0
}

impl PhantomParams {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: &str| Err(PhantomError::InvalidParams(m.to_string()));
        if !(self.contraction > 0.0 && self.contraction < 1.0) {
            return bad("contraction must lie in (0, 1)");
        }
        if !(self.wall_thickness > 0.0) {
            return bad("wall_thickness must be positive");
        }
        if self.n_phases < 2 {
            return bad("n_phases must be at least 2");
        }
        if self.lv_semi_axes_ed.iter().any(|&a| !(a > 0.0)) {
            return bad("semi-axes must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and non-negative");
        }
        if !(self.annulus_fraction > 0.0 && self.annulus_fraction <= 1.0) {
            return bad("annulus_fraction must lie in (0, 1]");
        }
        if self.sax_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(PhantomError::NonPositiveSpacing { view: View::Sax, spacing: self.sax_spacing.to_vec() });
        }
        if self.lax_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(PhantomError::NonPositiveSpacing { view: View::Lax4c, spacing: self.lax_spacing.to_vec() });
        }
        if self.sax_size.iter().chain(self.lax_size.iter()).any(|&n| n == 0) {
            return bad("grid sizes must be positive");
        }
        Ok(())
    }

    pub fn es_phase(&self) -> usize {
        self.n_phases / 2
    }

    pub fn scale_at(&self, t: usize) -> f64 {
        1.0 - (1.0 - self.contraction) * cycle_profile(t, self.n_phases)
    }

    /// Annulus radius factor relative to the ED endocardial cross-section.
    fn annulus_factor(&self) -> f64 {
        self.annulus_fraction * self.scale_at(self.es_phase())
    }

    pub fn geometry(&self, t: usize) -> PhaseGeometry {
        let p = cycle_profile(t, self.n_phases);
        let scale = self.scale_at(t);
        let base_z = self.base_plane_z_ed + (self.base_plane_z_es - self.base_plane_z_ed) * p;
        let k = self.annulus_factor();
        let c = self.lv_semi_axes_ed[2];
        let center_z = base_z - c * (scale * scale - k * k).max(0.0).sqrt();
        PhaseGeometry { scale, base_z, center_z }
    }

    /// Long-axis extent `[lo, hi]` of the epicardium over the whole cycle.
    fn z_extent(&self) -> (f64, f64) {
        let c = self.lv_semi_axes_ed[2];
        let w = self.wall_thickness;
        (0..self.n_phases).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
            let g = self.geometry(t);
            (lo.min(g.center_z - g.scale * c - w), hi.max(g.center_z + g.scale * c + w))
        })
    }

    /// World-space point mapped to the centre of every image grid.
    pub fn study_center(&self) -> [f64; 3] {
        let (lo, hi) = self.z_extent();
        [0.0, 0.0, 0.5 * (lo + hi)]
    }

    fn rv_center(&self) -> [f64; 2] {
        let th = 120f64.to_radians();
        [self.rv_offset * th.cos(), self.rv_offset * th.sin()]
    }

    /// Label of a world point at phase geometry `g`.
    pub fn label_at(&self, g: &PhaseGeometry, p: [f64; 3]) -> u8 {
        let [a, b, c] = self.lv_semi_axes_ed;
        let s = g.scale;
        let w = self.wall_thickness;
        let dz = p[2] - g.center_z;
        let q = |ax: f64, by: f64, cz: f64, x: f64, y: f64, z: f64| (x / ax).powi(2) + (y / by).powi(2) + (z / cz).powi(2);
        if q(s * a, s * b, s * c, p[0], p[1], dz) <= 1.0 {
            return label::LV;
        }
        if q(s * a + w, s * b + w, s * c + w, p[0], p[1], dz) <= 1.0 {
            return label::MYO;
        }
        let rc = self.rv_center();
        if q(s * a + w, s * b + w, 0.9 * s * c, p[0] - rc[0], p[1] - rc[1], dz) <= 1.0 {
            return label::RV;
        }
        label::BACKGROUND
    }

    fn check_grid(&self) -> Result<(), PhantomError> {
        let [a, b, _] = self.lv_semi_axes_ed;
        let w = self.wall_thickness;
        let (lo, hi) = self.z_extent();
        let need = |extent: f64, spacing: f64| (extent / spacing).ceil() as usize + 1;
        let sax_need = [need(2.0 * (a + w), self.sax_spacing[0]), need(2.0 * (b + w), self.sax_spacing[1]), need(hi - lo, self.sax_spacing[2])];
        for axis in 0..3 {
            if self.sax_size[axis] < sax_need[axis] {
                return Err(PhantomError::GridTooSmall { view: View::Sax, axis, required: sax_need[axis], actual: self.sax_size[axis] });
            }
        }
        let lax_need = [need(2.0 * (a.max(b) + w), self.lax_spacing[0]), need(hi - lo, self.lax_spacing[1])];
        for axis in 0..2 {
            if self.lax_size[axis] < lax_need[axis] {
                return Err(PhantomError::GridTooSmall { view: View::Lax4c, axis, required: lax_need[axis], actual: self.lax_size[axis] });
            }
        }
        Ok(())
    }

    /// World position of a SAX voxel centre.
    pub fn sax_world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let c = self.study_center();
        let [x, y, z] = self.sax_size;
        let sp = self.sax_spacing;
        [
            (i as f64 - (x as f64 - 1.0) / 2.0) * sp[0] + c[0],
            (j as f64 - (y as f64 - 1.0) / 2.0) * sp[1] + c[1],
            (k as f64 - (z as f64 - 1.0) / 2.0) * sp[2] + c[2],
        ]
    }

    /// In-plane `(lateral, long-axis)` coordinates of a LAX pixel centre.
    fn lax_plane(&self, i: usize, j: usize) -> (f64, f64) {
        let c = self.study_center();
        let [x, y] = self.lax_size;
        let sp = self.lax_spacing;
        ((i as f64 - (x as f64 - 1.0) / 2.0) * sp[0], (j as f64 - (y as f64 - 1.0) / 2.0) * sp[1] + c[2])
    }

    /// Pixel-centre mm coordinates (origin at pixel (0, 0)) of a LAX plane point.
    fn lax_to_mm(&self, lateral: f64, z: f64) -> [f64; 2] {
        let c = self.study_center();
        let [x, y] = self.lax_size;
        let sp = self.lax_spacing;
        let i = lateral / sp[0] + (x as f64 - 1.0) / 2.0;
        let j = (z - c[2]) / sp[1] + (y as f64 - 1.0) / 2.0;
        [i * sp[0], j * sp[1]]
    }

    /// ED-scale endocardial radius along in-plane direction `theta`.
    fn radial_extent(&self, theta: f64) -> f64 {
        let [a, b, _] = self.lv_semi_axes_ed;
        1.0 / ((theta.cos() / a).powi(2) + (theta.sin() / b).powi(2)).sqrt()
    }

    /// Valve 1, valve 2 and apex landmarks (mm, image frame) of `view` at phase `t`.
    pub fn landmarks(&self, view: View, t: usize) -> [[f64; 2]; 3] {
        let theta = view.lax_angle_deg().expect("landmarks exist for long-axis views only").to_radians();
        let g = self.geometry(t);
        let half = self.annulus_factor() * self.radial_extent(theta);
        let apex_z = g.center_z - g.scale * self.lv_semi_axes_ed[2];
        [self.lax_to_mm(-half, g.base_z), self.lax_to_mm(half, g.base_z), self.lax_to_mm(0.0, apex_z)]
    }
}

/// Closed-form EF, volumes, MAPSE, LV lengths and GLS.
pub fn analytic_ground_truth(params: &PhantomParams) -> Result<GroundTruth, PhantomError> {
    params.validate()?;
    let [a, b, c] = params.lv_semi_axes_ed;
    let es = params.es_phase();
    let s_es = params.scale_at(es);
    let edv = 4.0 / 3.0 * PI * a * b * c / 1000.0;
    let esv = edv * s_es.powi(3);
    let k = params.annulus_factor();
    let length = |s: f64| c * (s * s - k * k).max(0.0).sqrt() + s * c;
    let (len_ed, len_es) = (length(1.0), length(s_es));
    Ok(GroundTruth {
        edv_ml: edv,
        esv_ml: esv,
        ef: (edv - esv) / edv * 100.0,
        mapse: (params.base_plane_z_ed - params.base_plane_z_es).abs(),
        lv_length_ed: len_ed,
        lv_length_es: len_es,
        gls: (len_ed - len_es) / len_ed * 100.0,
        ed_phase: 0,
        es_phase: es,
    })
}

fn intensity(l: u8) -> f32 {
    match l {
        label::LV | label::RV => BLOOD_INTENSITY,
        label::MYO => MYO_INTENSITY,
        _ => BACKGROUND_INTENSITY,
    }
}

/// Rasterise a full study. Deterministic in `params` (including `seed`).
pub fn generate_study(params: &PhantomParams, id: &str) -> Result<CineStudy, PhantomError> {
    params.validate()?;
    params.check_grid()?;
    let gt = analytic_ground_truth(params)?;
    let n_t = params.n_phases;
    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).expect("noise sigma"))
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut views = BTreeMap::new();

    let [sx, sy, sz] = params.sax_size;
    let mut mask = Array4::<u8>::zeros((sx, sy, sz, n_t));
    for t in 0..n_t {
        let g = params.geometry(t);
        for i in 0..sx {
            for j in 0..sy {
                for k in 0..sz {
                    mask[[i, j, k, t]] = params.label_at(&g, params.sax_world(i, j, k));
                }
            }
        }
    }
    let image = render(&mask, noise.as_ref(), &mut rng);
    views.insert(View::Sax, ViewData { image, spacing: params.sax_spacing, mask: Some(mask), landmarks: None });

    for view in View::LAX {
        let theta = view.lax_angle_deg().unwrap_or(0.0).to_radians();
        let [lx, ly] = params.lax_size;
        let mut mask = Array4::<u8>::zeros((lx, ly, 1, n_t));
        let mut lms = Array3::<f64>::zeros((n_t, 3, 2));
        for t in 0..n_t {
            let g = params.geometry(t);
            for i in 0..lx {
                for j in 0..ly {
                    let (u, z) = params.lax_plane(i, j);
                    mask[[i, j, 0, t]] = params.label_at(&g, [u * theta.cos(), u * theta.sin(), z]);
                }
            }
            for (p, point) in params.landmarks(view, t).iter().enumerate() {
                lms[[t, p, 0]] = point[0];
                lms[[t, p, 1]] = point[1];
            }
        }
        let image = render(&mask, noise.as_ref(), &mut rng);
        let spacing = [params.lax_spacing[0], params.lax_spacing[1], 1.0];
        views.insert(view, ViewData { image, spacing, mask: Some(mask), landmarks: Some(lms) });
    }

    Ok(CineStudy {
        id: id.to_string(),
        views,
        gt_scalars: gt.to_map(),
        ed_phase: Some(gt.ed_phase),
        es_phase: Some(gt.es_phase),
    })
}

fn render(mask: &Array4<u8>, noise: Option<&Normal<f64>>, rng: &mut ChaCha8Rng) -> Array4<f32> {
    let mut image = mask.mapv(intensity);
    if let Some(n) = noise {
        for v in image.iter_mut() {
            *v += n.sample(rng) as f32;
        }
    }
    image
}
