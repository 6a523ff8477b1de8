//! Task heads on top of the pretrained encoder: UNetR-style dense decoder for
//! segmentation and landmark heatmaps, and a linear head on mean-pooled tokens
//! for classification, regression and landmark coordinates.
//!
//! Heads need features from an unmasked encoder pass. Their parameters live
//! under the `head/` name prefix so they share a checkpoint with the encoder.

mod losses;

pub use losses::{
    bce_with_logits, ce_label_smooth, dice_ce, heatmap_loss, mse, one_hot, wing_loss, DICE_SMOOTH, WING_EPS, WING_W,
};

use ndarray::{Array3, ArrayD};
use rand::Rng;
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::backbone::{EncoderOutput, MaskPattern, ModelError, MultiViewEncoder, ViewSpec};
use crate::nn::{Conv, ConvTranspose, InstanceNorm, Linear, ParamStore};
use crate::study::View;

/// Standard deviation of landmark heatmap kernels, in pixels.
pub const HEATMAP_SIGMA: f64 = 3.0;
/// Heatmap channels: two mitral annulus points and the apex.
pub const N_LANDMARKS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("landmark {index} at ({x:.2}, {y:.2}) px lies outside the {nx}x{ny} grid")]
    LandmarkOutsideGrid { index: usize, x: f64, y: f64, nx: usize, ny: usize },
    #[error("non-positive spacing {0:?}")]
    NonPositiveSpacing([f64; 2]),
}

/// Encoder pass over unmasked images, as required by every head.
pub fn encode_full(g: &mut Graph, encoder: &MultiViewEncoder, images: &[ArrayD<f64>]) -> Result<EncoderOutput, ModelError> {
    encoder.forward(g, images, &MaskPattern::none(&encoder.config))
}

/// Reject patterns with masked tokens for fine-tuning passes.
pub fn require_unmasked(pattern: &MaskPattern) -> Result<(), ModelError> {
    if pattern.n_masked() > 0 {
        Err(ModelError::MaskedInput)
    } else {
        Ok(())
    }
}

/// Rows of view `v` in the token matrix of an unmasked pass, as a `[E, D, gh, gw]` map.
fn view_token_map(g: &mut Graph, encoder: &MultiViewEncoder, tokens: Var, v: usize) -> Var {
    let offset: usize = encoder.config.views[..v].iter().map(ViewSpec::n_tokens).sum();
    let spec = &encoder.config.views[v];
    let [d, gh, gw] = spec.token_grid();
    let rows = g.slice(tokens, 0, offset, spec.n_tokens());
    let e = g.shape(rows)[1];
    let t = g.reshape(rows, &[d, gh, gw, e]);
    g.permute(t, &[3, 0, 1, 2])
}

/// Conv, instance norm, GELU.
#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv,
    norm: InstanceNorm,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: [usize; 3]) -> Self {
        let pad = [k[0] / 2, k[1] / 2, k[2] / 2];
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), cin, cout, k, [1, 1, 1], pad, false),
            norm: InstanceNorm::new(store, rng, &format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv.forward(g, x);
        let h = self.norm.forward(g, h);
        g.gelu(h)
    }
}

/// UNetR-style decoder for one view. Token features (final and a middle
/// transformer layer) are upsampled with transposed convolutions through the
/// 8x, 4x and 2x conv stage skips back to input resolution.
#[derive(Clone, Debug)]
pub struct UnetrHead {
    pub view: View,
    pub out_channels: usize,
    /// Decoder widths at 1x, 2x, 4x and 8x resolution.
    pub widths: [usize; 4],
    stem: ConvBlock,
    bottom: ConvBlock,
    ups: Vec<ConvTranspose>,
    fuse: Vec<ConvBlock>,
    out: Conv,
}

impl UnetrHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        encoder: &MultiViewEncoder,
        view: View,
        widths: [usize; 4],
        out_channels: usize,
    ) -> Result<Self, ModelError> {
        let cfg = &encoder.config;
        cfg.spec(view).ok_or(ModelError::UnknownView(view))?;
        let k = if view == View::Sax && cfg.sax_conv3d { [3, 3, 3] } else { [1, 3, 3] };
        let e = cfg.embed_dim;
        let [c1, c2] = cfg.conv_channels;
        let [w0, w1, w2, w3] = widths;
        let up = [1, 2, 2];
        let stem = ConvBlock::new(store, rng, &format!("{name}.stem"), 1, w0, k);
        let bottom = ConvBlock::new(store, rng, &format!("{name}.bottom"), 2 * e, w3, k);
        let ups = vec![
            ConvTranspose::new(store, rng, &format!("{name}.up8"), w3, w3, up),
            ConvTranspose::new(store, rng, &format!("{name}.up4"), w3, w2, up),
            ConvTranspose::new(store, rng, &format!("{name}.up2"), w2, w1, up),
            ConvTranspose::new(store, rng, &format!("{name}.up1"), w1, w0, up),
        ];
        let fuse = vec![
            ConvBlock::new(store, rng, &format!("{name}.fuse8"), w3 + e, w3, k),
            ConvBlock::new(store, rng, &format!("{name}.fuse4"), w2 + c2, w2, k),
            ConvBlock::new(store, rng, &format!("{name}.fuse2"), w1 + c1, w1, k),
            ConvBlock::new(store, rng, &format!("{name}.fuse1"), 2 * w0, w0, k),
        ];
        let out = Conv::new(store, rng, &format!("{name}.out"), w0, out_channels, [1, 1, 1], [1, 1, 1], [0, 0, 0], true);
        Ok(Self { view, out_channels, widths, stem, bottom, ups, fuse, out })
    }

    /// Logits `[out_channels, D, H, W]` for this head's view.
    pub fn forward(
        &self,
        g: &mut Graph,
        encoder: &MultiViewEncoder,
        enc: &EncoderOutput,
        image: &ArrayD<f64>,
    ) -> Result<Var, ModelError> {
        let v = encoder.view_position(self.view).ok_or(ModelError::UnknownView(self.view))?;
        let n_total: usize = encoder.config.n_tokens();
        if enc.index.len() != n_total {
            return Err(ModelError::MaskedInput);
        }
        let final_rows = encoder.normed(g, enc.tokens);
        let mid_rows = match enc.hidden.len() {
            0 | 1 => enc.tokens,
            n => enc.hidden[n / 2 - 1],
        };
        let top = view_token_map(g, encoder, final_rows, v);
        let mid = view_token_map(g, encoder, mid_rows, v);
        let h = g.concat(&[top, mid], 0);
        let mut h = self.bottom.forward(g, h);

        let x = g.input(image.clone());
        let stem = self.stem.forward(g, x);
        let [s1, s2, s3] = enc.stages[v];
        let skips = [s3, s2, s1, stem];
        for ((up, fuse), skip) in self.ups.iter().zip(&self.fuse).zip(skips) {
            h = up.forward(g, h);
            h = g.concat(&[h, skip], 0);
            h = fuse.forward(g, h);
        }
        Ok(self.out.forward(g, h))
    }
}

/// Linear layer on the mean of the normalised tokens of an unmasked pass.
#[derive(Clone, Debug)]
pub struct LinearHead {
    pub linear: Linear,
    pub n_out: usize,
}

impl LinearHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, embed_dim: usize, n_out: usize) -> Self {
        Self { linear: Linear::new(store, rng, &format!("{name}.linear"), embed_dim, n_out, true, false), n_out }
    }

    /// Outputs `[n_out]`.
    pub fn forward(&self, g: &mut Graph, encoder: &MultiViewEncoder, enc: &EncoderOutput) -> Var {
        let pooled = pool_tokens(g, encoder, enc);
        self.apply(g, pooled)
    }

    /// Linear map of a pooled feature vector.
    pub fn apply(&self, g: &mut Graph, features: Var) -> Var {
        let d = g.value(features).len();
        let m = g.reshape(features, &[1, d]);
        let y = self.linear.forward(g, m);
        g.reshape(y, &[self.n_out])
    }
}

/// Mean of the normalised encoder tokens, `[E]`.
pub fn pool_tokens(g: &mut Graph, encoder: &MultiViewEncoder, enc: &EncoderOutput) -> Var {
    let rows = encoder.normed(g, enc.tokens);
    let n = g.shape(rows)[0];
    let s = g.sum_axis(rows, 0);
    g.scale(s, 1.0 / n as f64)
}

/// Gaussian target maps `[3, X, Y]` for landmarks given in mm, with a kernel of
/// `sigma_px` pixels. Landmarks must fall inside the pixel grid.
pub fn gaussian_heatmap(points_mm: &[[f64; 2]], shape: [usize; 2], spacing: [f64; 2], sigma_px: f64) -> Result<Array3<f64>, HeadError> {
    if spacing.iter().any(|&s| s <= 0.0) {
        return Err(HeadError::NonPositiveSpacing(spacing));
    }
    let [nx, ny] = shape;
    let px: Vec<[f64; 2]> = points_mm.iter().map(|p| [p[0] / spacing[0], p[1] / spacing[1]]).collect();
    for (index, p) in px.iter().enumerate() {
        let inside = (0.0..=(nx as f64 - 1.0)).contains(&p[0]) && (0.0..=(ny as f64 - 1.0)).contains(&p[1]);
        if !inside {
            return Err(HeadError::LandmarkOutsideGrid { index, x: p[0], y: p[1], nx, ny });
        }
    }
    let s2 = 2.0 * sigma_px * sigma_px;
    Ok(Array3::from_shape_fn((px.len(), nx, ny), |(c, i, j)| {
        let (dx, dy) = (i as f64 - px[c][0], j as f64 - px[c][1]);
        (-(dx * dx + dy * dy) / s2).exp()
    }))
}

/// Default UNetR widths for an encoder: proportional to the conv stage widths.
pub fn default_widths(encoder: &MultiViewEncoder) -> [usize; 4] {
    let [c1, c2] = encoder.config.conv_channels;
    [(c1 / 2).max(4), c1, c2, c2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::backbone::ModelConfig;
    use crate::metrics::heatmap_to_landmarks;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_dim: 8,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 2,
            conv_channels: [4, 4],
            views: vec![ViewSpec::new(View::Sax, [16, 16, 2]), ViewSpec::new(View::Lax4c, [16, 32, 1])],
            mask_ratio: 0.5,
            sax_conv3d: false,
        }
    }

    fn images(cfg: &ModelConfig, seed: u64) -> Vec<ArrayD<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.views.iter().map(|s| ArrayD::from_shape_fn(IxDyn(&s.input_shape()), |_| rng.random::<f64>())).collect()
    }

    #[test]
    fn segmentation_logits_match_input_grid() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = MultiViewEncoder::new(&mut store, &mut rng, &cfg).unwrap();
        let heads: Vec<UnetrHead> = cfg
            .views
            .iter()
            .map(|s| UnetrHead::new(&mut store, &mut rng, &format!("head/{}", s.view.key()), &enc, s.view, [4, 4, 4, 4], 4).unwrap())
            .collect();
        let imgs = images(&cfg, 1);
        let mut g = Graph::with_params(&store);
        let out = encode_full(&mut g, &enc, &imgs).unwrap();
        for (h, s) in heads.iter().zip(&cfg.views) {
            let y = h.forward(&mut g, &enc, &out, &imgs[cfg.views.iter().position(|v| v == s).unwrap()]).unwrap();
            let [_, d, hh, ww] = s.input_shape();
            assert_eq!(g.shape(y), &[4, d, hh, ww]);
            let labels = g.value(y).map_axis(ndarray::Axis(0), |c| {
                c.iter().enumerate().fold((0usize, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
            });
            assert!(labels.iter().all(|&l| l < 4));
        }
    }

    #[test]
    fn masked_features_are_rejected() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = MultiViewEncoder::new(&mut store, &mut rng, &cfg).unwrap();
        let head = UnetrHead::new(&mut store, &mut rng, "head/seg", &enc, View::Lax4c, [4, 4, 4, 4], 4).unwrap();
        let pattern = MaskPattern::sample(&cfg, 0.5, &mut rng);
        assert_eq!(require_unmasked(&pattern), Err(ModelError::MaskedInput));
        let imgs = images(&cfg, 1);
        let mut g = Graph::with_params(&store);
        let out = enc.forward(&mut g, &imgs, &pattern).unwrap();
        assert_eq!(head.forward(&mut g, &enc, &out, &imgs[1]).unwrap_err(), ModelError::MaskedInput);
        assert!(require_unmasked(&MaskPattern::none(&cfg)).is_ok());
    }

    #[test]
    fn zero_linear_weights_give_constant_bias() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = MultiViewEncoder::new(&mut store, &mut rng, &cfg).unwrap();
        let head = LinearHead::new(&mut store, &mut rng, "head/cls", cfg.embed_dim, 5);
        store.value_mut(head.linear.w).fill(0.0);
        let b = head.linear.b.unwrap();
        store.value_mut(b).assign(&ArrayD::from_shape_vec(IxDyn(&[5]), vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        for seed in 0..3 {
            let imgs = images(&cfg, seed);
            let mut g = Graph::with_params(&store);
            let out = encode_full(&mut g, &enc, &imgs).unwrap();
            let y = head.forward(&mut g, &enc, &out);
            assert_eq!(g.value(y).as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        }
        let binary = LinearHead::new(&mut store, &mut rng, "head/bin", cfg.embed_dim, 1);
        assert_eq!(binary.n_out, 1);
    }

    #[test]
    fn gaussian_heatmap_examples() {
        let m = gaussian_heatmap(&[[6.0, 9.0], [0.0, 0.0], [30.0, 45.0]], [32, 32], [1.5, 1.5], HEATMAP_SIGMA).unwrap();
        assert_eq!(m[[0, 4, 6]], 1.0);
        assert!((m[[0, 7, 6]] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((m[[0, 7, 6]] - 0.6065).abs() < 1e-4);
        let decoded = heatmap_to_landmarks(m.view(), [1.5, 1.5]);
        assert_eq!(decoded.points, [[6.0, 9.0], [0.0, 0.0], [30.0, 45.0]]);
        let err = gaussian_heatmap(&[[6.0, 9.0], [0.0, 48.0], [1.0, 1.0]], [32, 32], [1.5, 1.5], 3.0).unwrap_err();
        assert!(matches!(err, HeadError::LandmarkOutsideGrid { index: 1, .. }));
        assert!(gaussian_heatmap(&[[-0.1, 0.0]], [4, 4], [1.0, 1.0], 3.0).is_err());
    }

    #[test]
    fn gaussian_heatmap_is_translation_equivariant() {
        let a = gaussian_heatmap(&[[10.0, 12.0]], [32, 32], [1.0, 1.0], 3.0).unwrap();
        let b = gaussian_heatmap(&[[13.0, 10.0]], [32, 32], [1.0, 1.0], 3.0).unwrap();
        for i in 3..32 {
            for j in 0..30 {
                assert!((b[[0, i, j]] - a[[0, i - 3, j + 2]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn heads_and_losses_pass_gradient_check() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = MultiViewEncoder::new(&mut store, &mut rng, &cfg).unwrap();
        let seg = UnetrHead::new(&mut store, &mut rng, "head/seg", &enc, View::Sax, [2, 3, 3, 4], 4).unwrap();
        let heat = UnetrHead::new(&mut store, &mut rng, "head/heat", &enc, View::Lax4c, [2, 3, 3, 4], 3).unwrap();
        let cls = LinearHead::new(&mut store, &mut rng, "head/cls", cfg.embed_dim, 3);
        let bin = LinearHead::new(&mut store, &mut rng, "head/bin", cfg.embed_dim, 1);
        let reg = LinearHead::new(&mut store, &mut rng, "head/reg", cfg.embed_dim, 1);
        let coord = LinearHead::new(&mut store, &mut rng, "head/coord", cfg.embed_dim, 6);
        let imgs = images(&cfg, 4);
        let seg_target = one_hot(
            ArrayD::from_shape_fn(IxDyn(&[2, 16, 16]), |d| ((d[1] / 4 + d[2] / 5 + d[0]) % 4) as u8).view(),
            4,
        );
        let heat_target = gaussian_heatmap(&[[3.0, 5.0], [10.0, 20.0], [8.0, 30.0]], [16, 32], [1.0, 1.0], 3.0)
            .unwrap()
            .into_shape_with_order(IxDyn(&[3, 1, 16, 32]))
            .unwrap();
        let coord_target = ArrayD::from_shape_vec(IxDyn(&[6]), vec![3.0, -12.0, 0.5, 4.0, 20.0, -1.0]).unwrap();
        let report = gradcheck::check_params(
            &mut store,
            |g| {
                let out = encode_full(g, &enc, &imgs).unwrap();
                let y = seg.forward(g, &enc, &out, &imgs[0]).unwrap();
                let l1 = dice_ce(g, y, &seg_target);
                let y = heat.forward(g, &enc, &out, &imgs[1]).unwrap();
                let l2 = heatmap_loss(g, y, &heat_target);
                let y = cls.forward(g, &enc, &out);
                let l3 = ce_label_smooth(g, y, 2, 0.1);
                let y = bin.forward(g, &enc, &out);
                let l4 = ce_label_smooth(g, y, 1, 0.1);
                let y = reg.forward(g, &enc, &out);
                let l5 = mse(g, y, &ArrayD::from_elem(IxDyn(&[1]), 0.6));
                let y = coord.forward(g, &enc, &out);
                let y = g.scale(y, 10.0);
                let l6 = wing_loss(g, y, &coord_target, WING_W, WING_EPS);
                let mut total = l1;
                for l in [l2, l3, l4, l5, l6] {
                    total = g.add(total, l);
                }
                total
            },
            1e-5,
            Some(4),
            0,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        assert_eq!(report.params_checked, store.len());
    }
}
