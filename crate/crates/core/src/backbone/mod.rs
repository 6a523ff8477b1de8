//! Multi-view convolution-transformer masked autoencoder.
//!
//! Every view is masked in 16x16 in-plane patches, downsampled 8x by its own
//! convolutional encoder (three stride-2 stages) and tokenised with 2x2
//! patches, so one mask patch maps to exactly one token. Visible tokens of all
//! views are concatenated and run through a shared transformer encoder; the
//! decoder fuses the conv stage features back in, fills masked slots with a
//! learned mask token and reconstructs every patch of every view.
//!
//! Images use the model layout `[1, D, H, W]`, which for a study view
//! `[X, Y, Z]` is `D = Z`, `H = X`, `W = Y`.

mod checkpoint;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use model::{
    masked_mse, patchify, unpatchify, ConvBranch, EncoderOutput, MaeDecoder, MaeModel, MultiViewEncoder, TokenIndex,
};

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Block, Conv, LayerNorm, Linear};
use crate::study::View;

/// In-plane size of one mask patch in pixels.
pub const MASK_PATCH: usize = 16;
/// Total downsampling of the convolutional stages.
pub const CONV_DOWNSAMPLE: usize = 8;
/// In-plane token patch on the downsampled grid.
pub const TOKEN_PATCH: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{view}: expected input shape {expected:?}, got {actual:?}")]
    ShapeMismatch { view: View, expected: Vec<usize>, actual: Vec<usize> },
    #[error("mask pattern does not match the model views: {0}")]
    PatternMismatch(String),
    #[error("no masked pixels in any view; the reconstruction loss is undefined")]
    EmptyMask,
    #[error("fine-tuning passes require an unmasked input (mask ratio 0)")]
    MaskedInput,
    #[error("view {0} is not part of this model")]
    UnknownView(View),
}

/// One input view and its voxel grid `(X, Y, Z)`; long-axis views have `Z = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub view: View,
    pub size: [usize; 3],
}

impl ViewSpec {
    pub fn new(view: View, size: [usize; 3]) -> Self {
        Self { view, size }
    }

    /// Model-layout input shape `[1, D, H, W]`.
    pub fn input_shape(&self) -> [usize; 4] {
        [1, self.size[2], self.size[0], self.size[1]]
    }

    /// Token grid `(D, H, W)`.
    pub fn token_grid(&self) -> [usize; 3] {
        [self.size[2], self.size[0] / MASK_PATCH, self.size[1] / MASK_PATCH]
    }

    pub fn n_tokens(&self) -> usize {
        self.token_grid().iter().product()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let [x, y, z] = self.size;
        if x == 0 || y == 0 || z == 0 || x % MASK_PATCH != 0 || y % MASK_PATCH != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{}: in-plane size {x}x{y} must be a positive multiple of {MASK_PATCH}",
                self.view
            )));
        }
        if self.view.is_lax() && z != 1 {
            return Err(ModelError::InvalidConfig(format!("{}: long-axis views have depth 1", self.view)));
        }
        Ok(())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    /// Channels of the 2x and 4x conv stages; the 8x stage has `embed_dim`.
    pub conv_channels: [usize; 2],
    pub views: Vec<ViewSpec>,
    pub mask_ratio: f64,
    /// Use 3x3x3 kernels for the short-axis branch instead of per-slice 3x3.
    #[serde(default)]
    pub sax_conv3d: bool,
}

impl ModelConfig {
    /// Small CPU-friendly configuration.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 2,
            mlp_ratio: 4,
            conv_channels: [16, 32],
            views: vec![
                ViewSpec::new(View::Sax, [64, 64, 4]),
                ViewSpec::new(View::Lax2c, [64, 64, 1]),
                ViewSpec::new(View::Lax3c, [64, 64, 1]),
                ViewSpec::new(View::Lax4c, [64, 64, 1]),
            ],
            mask_ratio: 0.75,
            sax_conv3d: false,
        }
    }

    /// Full-size configuration: ViT-Base encoder, 512-wide 8-block decoder.
    pub fn base() -> Self {
        Self {
            embed_dim: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            decoder_dim: 512,
            decoder_depth: 8,
            decoder_heads: 16,
            mlp_ratio: 4,
            conv_channels: [64, 128],
            views: vec![
                ViewSpec::new(View::Sax, [192, 192, 16]),
                ViewSpec::new(View::Lax2c, [256, 256, 1]),
                ViewSpec::new(View::Lax3c, [256, 256, 1]),
                ViewSpec::new(View::Lax4c, [256, 256, 1]),
            ],
            mask_ratio: 0.75,
            sax_conv3d: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.embed_dim == 0 || self.encoder_heads == 0 || self.embed_dim % self.encoder_heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.encoder_heads));
        }
        if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!("decoder_dim {} not divisible by {} heads", self.decoder_dim, self.decoder_heads));
        }
        if self.mlp_ratio == 0 || self.conv_channels.contains(&0) {
            return bad("mlp_ratio and conv channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.views.is_empty() {
            return bad("no views".into());
        }
        for (i, v) in self.views.iter().enumerate() {
            v.validate()?;
            if self.views[..i].iter().any(|w| w.view == v.view) {
                return bad(format!("duplicate view {}", v.view));
            }
        }
        Ok(())
    }

    pub fn spec(&self, view: View) -> Option<&ViewSpec> {
        self.views.iter().find(|v| v.view == view)
    }

    /// Same architecture restricted to `views` (in the given order).
    pub fn with_views(&self, views: &[View]) -> Result<Self, ModelError> {
        let specs = views
            .iter()
            .map(|&v| self.spec(v).cloned().ok_or(ModelError::UnknownView(v)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { views: specs, ..self.clone() })
    }

    pub fn n_tokens(&self) -> usize {
        self.views.iter().map(ViewSpec::n_tokens).sum()
    }

    fn conv_kernel(&self, view: View) -> [usize; 3] {
        if view == View::Sax && self.sax_conv3d {
            [3, 3, 3]
        } else {
            [1, 3, 3]
        }
    }

    /// Parameters of one view's conv branch plus its view embedding.
    pub fn branch_param_count(&self, view: View) -> usize {
        let k = self.conv_kernel(view);
        let [c1, c2] = self.conv_channels;
        let e = self.embed_dim;
        Conv::param_count(1, c1, k, false)
            + LayerNorm::param_count(c1)
            + Conv::param_count(c1, c2, k, false)
            + LayerNorm::param_count(c2)
            + Conv::param_count(c2, e, k, false)
            + LayerNorm::param_count(e)
            + Conv::param_count(e, e, [1, TOKEN_PATCH, TOKEN_PATCH], true)
            + e
    }

    /// Conv branches, transformer blocks and the final encoder norm.
    pub fn encoder_param_count(&self) -> usize {
        self.views.iter().map(|v| self.branch_param_count(v.view)).sum::<usize>()
            + self.encoder_depth * Block::param_count(self.embed_dim, self.mlp_ratio)
            + LayerNorm::param_count(self.embed_dim)
    }

    pub fn decoder_param_count(&self) -> usize {
        let [c1, c2] = self.conv_channels;
        let (e, d) = (self.embed_dim, self.decoder_dim);
        let per_view = Linear::param_count(c1, e, true)
            + Linear::param_count(c2, e, true)
            + d
            + Linear::param_count(d, MASK_PATCH * MASK_PATCH, true);
        self.views.len() * per_view
            + Linear::param_count(e, d, true)
            + d
            + self.decoder_depth * Block::param_count(d, self.mlp_ratio)
            + LayerNorm::param_count(d)
    }

    /// Closed-form count of learnable scalars of the full autoencoder.
    pub fn param_count(&self) -> usize {
        self.encoder_param_count() + self.decoder_param_count()
    }
}

/// Per-view boolean token masks (`true` = masked).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPattern {
    pub masks: Vec<Vec<bool>>,
    pub ratio: f64,
}

/// Mask `round(ratio * n_tokens)` tokens chosen uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(n_tokens: usize, ratio: f64, rng: &mut R) -> Vec<bool> {
    let k = ((ratio * n_tokens as f64).round() as usize).min(n_tokens);
    let mut m = vec![false; n_tokens];
    for i in rand::seq::index::sample(rng, n_tokens, k) {
        m[i] = true;
    }
    m
}

impl MaskPattern {
    pub fn sample<R: Rng + ?Sized>(config: &ModelConfig, ratio: f64, rng: &mut R) -> Self {
        Self { masks: config.views.iter().map(|v| sample_mask(v.n_tokens(), ratio, rng)).collect(), ratio }
    }

    /// Nothing masked.
    pub fn none(config: &ModelConfig) -> Self {
        Self { masks: config.views.iter().map(|v| vec![false; v.n_tokens()]).collect(), ratio: 0.0 }
    }

    pub fn visible(&self, view: usize) -> Vec<usize> {
        (0..self.masks[view].len()).filter(|&i| !self.masks[view][i]).collect()
    }

    pub fn masked(&self, view: usize) -> Vec<usize> {
        (0..self.masks[view].len()).filter(|&i| self.masks[view][i]).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }

    pub fn n_visible(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| !m).count()
    }

    pub fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.masks.len() != config.views.len() {
            return Err(ModelError::PatternMismatch(format!("{} masks for {} views", self.masks.len(), config.views.len())));
        }
        for (m, v) in self.masks.iter().zip(&config.views) {
            if m.len() != v.n_tokens() {
                return Err(ModelError::PatternMismatch(format!("{}: {} mask entries for {} tokens", v.view, m.len(), v.n_tokens())));
            }
        }
        Ok(())
    }
}

/// Zero the 16x16 (x1 in depth) pixel blocks of masked tokens in a `[1, D, H, W]` image.
pub fn apply_mask(image: &ArrayD<f64>, mask: &[bool], spec: &ViewSpec) -> Result<ArrayD<f64>, ModelError> {
    let expected = spec.input_shape().to_vec();
    if image.shape() != expected.as_slice() {
        return Err(ModelError::ShapeMismatch { view: spec.view, expected, actual: image.shape().to_vec() });
    }
    if mask.len() != spec.n_tokens() {
        return Err(ModelError::PatternMismatch(format!("{}: {} mask entries for {} tokens", spec.view, mask.len(), spec.n_tokens())));
    }
    let [_, gh, gw] = spec.token_grid();
    let mut out = image.clone();
    for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (d, rest) = (t / (gh * gw), t % (gh * gw));
        let (i, j) = (rest / gw, rest % gw);
        let mut plane = out.index_axis_mut(Axis(0), 0);
        let mut slab = plane.index_axis_mut(Axis(0), d);
        slab.slice_mut(ndarray::s![i * MASK_PATCH..(i + 1) * MASK_PATCH, j * MASK_PATCH..(j + 1) * MASK_PATCH]).fill(0.0);
    }
    Ok(out)
}

/// `[1, D, H, W]` model input from a study view phase `[X, Y, Z]`.
pub fn view_to_input(phase: ndarray::ArrayView3<f32>) -> ArrayD<f64> {
    let s = phase.shape();
    let mut out = ArrayD::zeros(IxDyn(&[1, s[2], s[0], s[1]]));
    for ((x, y, z), &v) in phase.indexed_iter() {
        out[[0, z, x, y]] = v as f64;
    }
    out
}

/// `[X, Y, Z]` label map from a `[D, H, W]` model-layout array.
pub fn labels_from_model_layout(a: &ndarray::Array3<u8>) -> ndarray::Array3<u8> {
    a.clone().permuted_axes([1, 2, 0]).as_standard_layout().into_owned()
}
