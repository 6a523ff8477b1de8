//! Preprocessing (resample, crop/pad, intensity normalisation) and on-disk
//! formats for studies and checkpoints.

pub mod container;
pub mod nifti;
mod studyio;

pub use container::{read_container, write_container, ArrayData, Container, ContainerError};
pub use studyio::{preprocess_study, read_study, study_from_container, study_to_container, write_study, PreprocessConfig};

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, Slice};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::percentile;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("spacing on axis {axis} must be positive, got {value}")]
    NonPositiveSpacing { axis: usize, value: f64 },
    #[error("axis {axis} has a single sample and cannot be resampled from {from} mm to {to} mm")]
    DegenerateAxis { axis: usize, from: f64, to: f64 },
    #[error("spacing has {spacing} entries but image has {ndim} axes")]
    RankMismatch { spacing: usize, ndim: usize },
    #[error("target size on axis {0} must be positive")]
    ZeroSize(usize),
}

/// Target voxel spacing (mm) and size per spatial axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub spacing: Vec<f64>,
    pub size: Vec<usize>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        for (axis, &value) in self.spacing.iter().enumerate() {
            if !(value > 0.0) {
                return Err(GridError::NonPositiveSpacing { axis, value });
            }
        }
        if let Some(axis) = self.size.iter().position(|&s| s == 0) {
            return Err(GridError::ZeroSize(axis));
        }
        if self.spacing.len() != self.size.len() {
            return Err(GridError::RankMismatch { spacing: self.spacing.len(), ndim: self.size.len() });
        }
        Ok(())
    }
}

/// Number of output samples when resampling `n` samples from `from` to `to` mm.
pub fn resampled_len(n: usize, from: f64, to: f64) -> usize {
    ((n as f64 * from / to).round() as usize).max(1)
}

/// Input coordinate (in input index units) of output sample `j`, centre-aligned.
pub fn source_coordinate(j: usize, from: f64, to: f64) -> f64 {
    (j as f64 + 0.5) * to / from - 0.5
}

/// Resample the leading `spacing_in.len()` axes; trailing axes (e.g. time) are kept.
/// Linear interpolation per axis (separable), or nearest neighbour for label maps.
pub fn resample<T>(image: ArrayViewD<T>, spacing_in: &[f64], spacing_out: &[f64], nearest: bool) -> Result<ArrayD<T>, GridError>
where
    T: Copy + Into<f64> + FromF64,
{
    if spacing_in.len() != spacing_out.len() || spacing_in.len() > image.ndim() {
        return Err(GridError::RankMismatch { spacing: spacing_in.len(), ndim: image.ndim() });
    }
    for (axis, (&a, &b)) in spacing_in.iter().zip(spacing_out).enumerate() {
        for v in [a, b] {
            if !(v > 0.0) {
                return Err(GridError::NonPositiveSpacing { axis, value: v });
            }
        }
        if image.shape()[axis] == 1 && a != b {
            return Err(GridError::DegenerateAxis { axis, from: a, to: b });
        }
    }
    let mut cur: ArrayD<f64> = image.mapv(Into::into);
    for (axis, (&from, &to)) in spacing_in.iter().zip(spacing_out).enumerate() {
        if from == to {
            continue;
        }
        cur = resample_axis(&cur, axis, from, to, nearest);
    }
    Ok(cur.mapv(T::from_f64))
}

fn resample_axis(a: &ArrayD<f64>, axis: usize, from: f64, to: f64, nearest: bool) -> ArrayD<f64> {
    let n = a.shape()[axis];
    let m = resampled_len(n, from, to);
    let mut shape = a.shape().to_vec();
    shape[axis] = m;
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for j in 0..m {
        let u = source_coordinate(j, from, to).clamp(0.0, (n - 1) as f64);
        let mut dst = out.index_axis_mut(Axis(axis), j);
        if nearest {
            let i = ((u + 0.5).floor() as usize).min(n - 1);
            dst.assign(&a.index_axis(Axis(axis), i));
        } else {
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let w = u - i0 as f64;
            let lo = a.index_axis(Axis(axis), i0);
            let hi = a.index_axis(Axis(axis), i1);
            ndarray::Zip::from(&mut dst).and(&lo).and(&hi).for_each(|d, &l, &h| *d = l * (1.0 - w) + h * w);
        }
    }
    out
}

/// Conversion back from the f64 working type.
pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl FromF64 for u8 {
    fn from_f64(v: f64) -> Self {
        v.round() as u8
    }
}

/// Offset applied on one axis by [`crop_or_pad`]: positive pads before, negative crops before.
pub fn crop_pad_offset(current: usize, target: usize) -> isize {
    if target >= current {
        ((target - current) / 2) as isize
    } else {
        -(((current - target) / 2) as isize)
    }
}

/// Centre crop or zero-pad the leading `target.len()` axes. With an odd
/// difference the extra plane is added to or removed from the high-index side.
pub fn crop_or_pad<T: Clone + Default>(image: ArrayViewD<T>, target: &[usize]) -> ArrayD<T> {
    let mut shape = image.shape().to_vec();
    shape[..target.len()].copy_from_slice(target);
    let mut out = ArrayD::from_elem(IxDyn(&shape), T::default());
    let mut src = image.view();
    let mut dst = out.view_mut();
    for (axis, &t) in target.iter().enumerate() {
        let n = image.shape()[axis];
        let off = crop_pad_offset(n, t).unsigned_abs();
        let len = n.min(t);
        if t >= n {
            dst.slice_axis_inplace(Axis(axis), Slice::from(off..off + len));
        } else {
            src.slice_axis_inplace(Axis(axis), Slice::from(off..off + len));
        }
    }
    dst.assign(&src);
    out
}

/// Clip to the [1st, 99th] percentiles and map affinely to [0, 1].
/// Constant images become all zeros.
pub fn normalize_intensity(image: ArrayViewD<f32>) -> ArrayD<f32> {
    let vals: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    let (lo, hi) = match (percentile(&vals, 1.0), percentile(&vals, 99.0)) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => return image.to_owned(),
    };
    if hi <= lo {
        return ArrayD::zeros(image.raw_dim());
    }
    image.mapv(|v| ((v as f64).clamp(lo, hi) - lo) as f32 / (hi - lo) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2, Dimension};
    use proptest::prelude::*;

    #[test]
    fn resample_identity_and_constant() {
        let img = ArrayD::from_shape_fn(IxDyn(&[5, 4, 3]), |d| (d[0] * 7 + d[1] * 3 + d[2]) as f32);
        assert_eq!(resample(img.view(), &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], false).unwrap(), img);
        let c = ArrayD::from_elem(IxDyn(&[6, 5]), 2.5f32);
        let r = resample(c.view(), &[1.0, 1.0], &[0.7, 1.6], false).unwrap();
        assert_eq!(r.shape(), &[9, 3]);
        assert!(r.iter().all(|&v| (v - 2.5).abs() < 1e-6));
    }

    #[test]
    fn ramp_upsample_matches_hand_interpolation() {
        let ramp = arr1(&[0.0f64, 1.0, 2.0, 3.0]).into_dyn();
        let r = resample(ramp.view(), &[2.0], &[1.0], false).unwrap();
        // output centres at mm 0.5, 1.5, ... map to input index (j + 0.5) / 2 - 0.5
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        assert_eq!(r.len(), 8);
        for (a, b) in r.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn extent_preserved_within_one_voxel() {
        for (n, from, to) in [(17usize, 1.3, 1.0), (64, 1.5, 1.0), (10, 1.0, 3.0)] {
            let m = resampled_len(n, from, to);
            assert!((m as f64 * to - n as f64 * from).abs() <= to + 1e-9);
        }
    }

    #[test]
    fn degenerate_axis_named() {
        let img = ArrayD::<f32>::zeros(IxDyn(&[4, 1, 3]));
        assert_eq!(
            resample(img.view(), &[1.0, 1.0, 1.0], &[1.0, 2.0, 1.0], false),
            Err(GridError::DegenerateAxis { axis: 1, from: 1.0, to: 2.0 })
        );
        assert!(resample(img.view(), &[1.0, 1.0, 1.0], &[2.0, 1.0, 1.0], false).is_ok());
    }

    #[test]
    fn nearest_keeps_label_set() {
        let m = ArrayD::from_shape_fn(IxDyn(&[6, 6]), |d| ((d[0] + d[1]) % 4) as u8);
        let r = resample(m.view(), &[1.0, 1.0], &[0.6, 1.7], true).unwrap();
        assert!(r.iter().all(|&v| v < 4));
    }

    #[test]
    fn round_trip_error_shrinks_with_finer_spacing() {
        let f = |x: f64, y: f64| (x / 9.0).sin() * (y / 7.0).cos();
        let mut errs = vec![];
        for sp in [2.0, 1.0] {
            let n = (64.0 / sp) as usize;
            let img = Array2::from_shape_fn((n, n), |(i, j)| f((i as f64 + 0.5) * sp, (j as f64 + 0.5) * sp)).into_dyn();
            let there = resample(img.view(), &[sp, sp], &[sp * 2.0, sp * 2.0], false).unwrap();
            let back = resample(there.view(), &[sp * 2.0, sp * 2.0], &[sp, sp], false).unwrap();
            // ignore the clamped border
            let inner = |a: &ArrayD<f64>| a.slice_each_axis(|ax| Slice::from(3..ax.len - 3)).to_owned();
            let e = (&inner(&back) - &inner(&img)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            errs.push(e);
        }
        assert!(errs[1] < errs[0], "{errs:?}");
    }

    #[test]
    fn crop_pad_examples() {
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 3]), |d| (d[0] * 3 + d[1] + 1) as f32);
        assert_eq!(crop_or_pad(x.view(), &[4, 3]), x);
        let p = crop_or_pad(x.view(), &[6, 3]);
        assert!(p.index_axis(Axis(0), 0).iter().all(|&v| v == 0.0));
        assert!(p.index_axis(Axis(0), 5).iter().all(|&v| v == 0.0));
        assert_eq!(p.index_axis(Axis(0), 1), x.index_axis(Axis(0), 0));
        let y = ArrayD::from_shape_fn(IxDyn(&[5]), |d| d[0] as u8);
        assert_eq!(crop_or_pad(y.view(), &[4]).as_slice().unwrap(), &[0, 1, 2, 3]);
        assert_eq!(crop_or_pad(y.view(), &[6]).as_slice().unwrap(), &[0, 1, 2, 3, 4, 0]);
        assert_eq!(crop_or_pad(y.view(), &[2]).as_slice().unwrap(), &[1, 2]);
    }

    #[test]
    fn normalize_examples() {
        let c = ArrayD::from_elem(IxDyn(&[5, 5]), 3.0f32);
        assert!(normalize_intensity(c.view()).iter().all(|&v| v == 0.0));
        let v = ArrayD::from_shape_fn(IxDyn(&[101]), |d| d[0] as f32);
        let n = normalize_intensity(v.view());
        assert!(n[[0]].abs() < 1e-6 && (n[[100]] - 1.0).abs() < 1e-6 && (n[[50]] - 0.5).abs() < 1e-6);
        let exact = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.0f32, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(normalize_intensity(exact.view()), exact);
    }

    proptest! {
        #[test]
        fn pad_then_crop_is_identity(
            dims in proptest::collection::vec(1usize..7, 1..4),
            grow in proptest::collection::vec(0usize..5, 3),
            seed in any::<u64>(),
        ) {
            let x = ArrayD::from_shape_fn(IxDyn(&dims), |d| {
                let k: usize = d.as_array_view().iter().enumerate().map(|(i, &v)| v * (i + 3)).sum();
                (seed.wrapping_mul(k as u64 + 1) % 251) as f32
            });
            let bigger: Vec<usize> = dims.iter().zip(&grow).map(|(&d, &g)| d + g).collect();
            let padded = crop_or_pad(x.view(), &bigger);
            prop_assert_eq!(crop_or_pad(padded.view(), &dims), x);
        }
    }
}
