use ndarray::{s, Array2, Array3, ArrayD, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::finetune::Sample;
use super::TrainError;

/// Ranges of the random augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub gamma: [f64; 2],
    pub rotation_deg: f64,
    pub zoom: [f64; 2],
    pub shear_deg: f64,
    pub shift_px: f64,
    /// Probability of zeroing one input frame during segmentation training.
    pub frame_dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            gamma: [0.7, 1.5],
            rotation_deg: 15.0,
            zoom: [0.9, 1.1],
            shear_deg: 5.0,
            shift_px: 10.0,
            frame_dropout: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.gamma[0] > 0.0
            && self.gamma[0] <= self.gamma[1]
            && self.zoom[0] > 0.0
            && self.zoom[0] <= self.zoom[1]
            && self.rotation_deg >= 0.0
            && self.shear_deg >= 0.0
            && self.shift_px >= 0.0
            && (0.0..=1.0).contains(&self.frame_dropout);
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("bad augmentation ranges {self:?}")))
        }
    }
}

/// In-plane affine transform about the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub zoom: f64,
    pub shear_deg: f64,
    /// Shift along `(H, W)` in pixels.
    pub shift: [f64; 2],
}

impl AffineParams {
    pub fn identity() -> Self {
        Self { rotation_deg: 0.0, zoom: 1.0, shear_deg: 0.0, shift: [0.0, 0.0] }
    }

    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let z = self.zoom;
        // rotation * shear * zoom
        [[c * z, (c * k - s) * z], [s * z, (s * k + c) * z]]
    }

    /// Map an input pixel coordinate to its output position on an `[h, w]` grid.
    pub fn forward_point(&self, p: [f64; 2], shape: [usize; 2]) -> [f64; 2] {
        let m = self.linear();
        let c = centre(shape);
        let d = [p[0] - c[0], p[1] - c[1]];
        [
            c[0] + m[0][0] * d[0] + m[0][1] * d[1] + self.shift[0],
            c[1] + m[1][0] * d[0] + m[1][1] * d[1] + self.shift[1],
        ]
    }

    /// Input coordinate sampled for output pixel `q`.
    pub fn inverse_point(&self, q: [f64; 2], shape: [usize; 2]) -> [f64; 2] {
        let m = self.linear();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let c = centre(shape);
        let d = [q[0] - c[0] - self.shift[0], q[1] - c[1] - self.shift[1]];
        [c[0] + (m[1][1] * d[0] - m[0][1] * d[1]) / det, c[1] + (-m[1][0] * d[0] + m[0][0] * d[1]) / det]
    }
}

fn centre(shape: [usize; 2]) -> [f64; 2] {
    [(shape[0] as f64 - 1.0) / 2.0, (shape[1] as f64 - 1.0) / 2.0]
}

/// Source coordinates of every output pixel, `[h, w]` pairs.
pub fn affine_grid(params: &AffineParams, shape: [usize; 2]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(shape[0] * shape[1]);
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            out.push(params.inverse_point([i as f64, j as f64], shape));
        }
    }
    out
}

/// Bilinear warp of one plane; samples outside the plane read zero.
pub fn warp_image(plane: ArrayView2<f64>, params: &AffineParams) -> Array2<f64> {
    let (h, w) = plane.dim();
    let grid = affine_grid(params, [h, w]);
    let at = |i: i64, j: i64| if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w { plane[[i as usize, j as usize]] } else { 0.0 };
    Array2::from_shape_fn((h, w), |(i, j)| {
        let [y, x] = grid[i * w + j];
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as i64, x0 as i64);
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    })
}

/// Nearest-neighbour warp of one label plane; outside reads background.
pub fn warp_labels(plane: ArrayView2<u8>, params: &AffineParams) -> Array2<u8> {
    let (h, w) = plane.dim();
    let grid = affine_grid(params, [h, w]);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let [y, x] = grid[i * w + j];
        let (yi, xi) = ((y + 0.5).floor(), (x + 0.5).floor());
        if yi >= 0.0 && xi >= 0.0 && (yi as usize) < h && (xi as usize) < w {
            plane[[yi as usize, xi as usize]]
        } else {
            0
        }
    })
}

/// Random augmentation drawn from an [`AugmentConfig`].
#[derive(Clone, Debug)]
pub struct Augmenter {
    pub config: AugmentConfig,
}

impl Augmenter {
    pub fn new(config: AugmentConfig) -> Self {
        Self { config }
    }

    pub fn draw_affine<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let c = &self.config;
        let sym = |rng: &mut R, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let range = |rng: &mut R, r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
        AffineParams {
            rotation_deg: sym(rng, c.rotation_deg),
            zoom: range(rng, c.zoom),
            shear_deg: sym(rng, c.shear_deg),
            shift: [sym(rng, c.shift_px), sym(rng, c.shift_px)],
        }
    }

    pub fn draw_gamma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = self.config.gamma;
        if g[1] > g[0] {
            rng.random_range(g[0]..=g[1])
        } else {
            g[0]
        }
    }

    /// Gamma on all views, an independent affine per view (shared by every
    /// frame of the sample and applied to images, masks and landmarks alike)
    /// and, for segmentation, frame dropout.
    pub fn apply<R: Rng + ?Sized>(&self, sample: &mut Sample, segmentation: bool, rng: &mut R) {
        if !self.config.enabled {
            return;
        }
        let gamma = self.draw_gamma(rng);
        let n_views = sample.frames.first().map_or(0, |f| f.images.len());
        let affines: Vec<AffineParams> = (0..n_views).map(|_| self.draw_affine(rng)).collect();
        for frame in &mut sample.frames {
            for (v, a) in affines.iter().enumerate() {
                apply_gamma(&mut frame.images[v], gamma);
                apply_affine(&mut frame.images[v], frame.masks[v].as_mut(), frame.landmarks[v].as_mut(), a);
            }
        }
        if segmentation && n_views > 0 && rng.random::<f64>() < self.config.frame_dropout {
            let v = rng.random_range(0..n_views);
            let depth = sample.frames[0].images[v].shape()[1];
            let z = rng.random_range(0..depth);
            for frame in &mut sample.frames {
                frame.images[v].slice_mut(s![0, z, .., ..]).fill(0.0);
            }
        }
    }
}

/// `x^gamma` on non-negative intensities.
pub fn apply_gamma(image: &mut ArrayD<f64>, gamma: f64) {
    if gamma != 1.0 {
        image.mapv_inplace(|v| v.max(0.0).powf(gamma));
    }
}

/// Warp every slice of a `[1, D, H, W]` image, its `[D, H, W]` mask and pixel landmarks.
pub fn apply_affine(
    image: &mut ArrayD<f64>,
    mask: Option<&mut Array3<u8>>,
    landmarks: Option<&mut [[f64; 2]; 3]>,
    params: &AffineParams,
) {
    if *params == AffineParams::identity() {
        return;
    }
    let shape = [image.shape()[2], image.shape()[3]];
    for z in 0..image.shape()[1] {
        let warped = warp_image(image.slice(s![0, z, .., ..]), params);
        image.slice_mut(s![0, z, .., ..]).assign(&warped);
    }
    if let Some(m) = mask {
        for mut plane in m.axis_iter_mut(Axis(0)) {
            let warped = warp_labels(plane.view(), params);
            plane.assign(&warped);
        }
    }
    if let Some(l) = landmarks {
        for p in l.iter_mut() {
            *p = params.forward_point(*p, shape);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc() -> Array2<u8> {
        Array2::from_shape_fn((48, 48), |(i, j)| {
            let (di, dj) = (i as f64 - 22.0, j as f64 - 25.0);
            if di * di + dj * dj < 100.0 {
                3
            } else if di * di / 2.0 + dj * dj < 150.0 {
                1
            } else {
                0
            }
        })
    }

    #[test]
    fn identity_draw_and_unit_gamma_leave_data_unchanged() {
        let img = disc().mapv(|v| v as f64 / 3.0);
        assert_eq!(warp_image(img.view(), &AffineParams::identity()), img);
        assert_eq!(warp_labels(disc().view(), &AffineParams::identity()), disc());
        let mut a = img.clone().into_dyn();
        apply_gamma(&mut a, 1.0);
        assert_eq!(a, img.into_dyn());
        let aug = Augmenter::new(AugmentConfig {
            gamma: [1.0, 1.0],
            rotation_deg: 0.0,
            zoom: [1.0, 1.0],
            shear_deg: 0.0,
            shift_px: 0.0,
            ..AugmentConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(aug.draw_affine(&mut rng), AffineParams::identity());
        assert_eq!(aug.draw_gamma(&mut rng), 1.0);
    }

    #[test]
    fn forward_and_inverse_points_agree() {
        let p = AffineParams { rotation_deg: 12.0, zoom: 1.07, shear_deg: -4.0, shift: [3.0, -7.5] };
        for q in [[0.0, 0.0], [10.5, 31.0], [47.0, 2.0]] {
            let back = p.forward_point(p.inverse_point(q, [48, 48]), [48, 48]);
            assert!((back[0] - q[0]).abs() < 1e-10 && (back[1] - q[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn mask_warp_round_trip_only_touches_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let aug = Augmenter::new(AugmentConfig { shift_px: 3.0, ..AugmentConfig::default() });
        for _ in 0..5 {
            let a = aug.draw_affine(&mut rng);
            let m = disc();
            let there = warp_labels(m.view(), &a);
            // invert: forward map of the inverse transform, sampled back on the original grid
            let back = Array2::from_shape_fn((48, 48), |(i, j)| {
                let q = a.forward_point([i as f64, j as f64], [48, 48]);
                let (yi, xi) = ((q[0] + 0.5).floor(), (q[1] + 0.5).floor());
                if yi >= 0.0 && xi >= 0.0 && yi < 48.0 && xi < 48.0 {
                    there[[yi as usize, xi as usize]]
                } else {
                    0
                }
            });
            for label in [1u8, 3] {
                let d = dice(m.view().into_dyn(), back.view().into_dyn(), label).unwrap();
                assert!(d > 0.97, "label {label} dice {d}");
            }
            // every disagreement lies on a label boundary
            for ((i, j), &v) in back.indexed_iter() {
                if v != m[[i, j]] {
                    let near = (-1i64..=1).any(|di| {
                        (-1i64..=1).any(|dj| {
                            let (y, x) = (i as i64 + di, j as i64 + dj);
                            y >= 0 && x >= 0 && y < 48 && x < 48 && m[[y as usize, x as usize]] != m[[i, j]]
                        })
                    });
                    assert!(near, "interior voxel ({i}, {j}) changed");
                }
            }
        }
    }

    #[test]
    fn landmarks_follow_the_image() {
        let mut img = ArrayD::zeros(ndarray::IxDyn(&[1, 1, 48, 48]));
        img[[0, 0, 20, 30]] = 1.0;
        let mut lm = [[20.0, 30.0], [0.0, 0.0], [47.0, 47.0]];
        let p = AffineParams { rotation_deg: 0.0, zoom: 1.0, shear_deg: 0.0, shift: [4.0, -6.0] };
        apply_affine(&mut img, None, Some(&mut lm), &p);
        assert_eq!(lm[0], [24.0, 24.0]);
        assert_eq!(img[[0, 0, 24, 24]], 1.0);
    }
}
