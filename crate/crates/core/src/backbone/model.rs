use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{apply_mask, MaskPattern, ModelConfig, ModelError, ViewSpec, MASK_PATCH, TOKEN_PATCH};
use crate::autograd::{Graph, Var};
use crate::nn::{Block, ChannelNorm, Conv, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::study::View;

/// Fixed sin-cos embedding over the token grid `(D, H, W)`. Short-axis views
/// encode all three axes, long-axis views only the in-plane two. Each axis
/// gets `2 * floor(dim / (2 * n_axes))` channels; leftovers stay zero.
pub fn sincos_embedding(dim: usize, grid: [usize; 3], with_depth: bool) -> Array2<f64> {
    let axes: Vec<usize> = if with_depth { vec![0, 1, 2] } else { vec![1, 2] };
    let per_axis = 2 * (dim / (2 * axes.len()));
    let half = per_axis / 2;
    let n: usize = grid.iter().product();
    let mut out = Array2::zeros((n, dim));
    for t in 0..n {
        let coord = [t / (grid[1] * grid[2]), (t / grid[2]) % grid[1], t % grid[2]];
        for (a, &axis) in axes.iter().enumerate() {
            let pos = coord[axis] as f64;
            for k in 0..half {
                let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
                out[[t, a * per_axis + k]] = (pos * omega).sin();
                out[[t, a * per_axis + half + k]] = (pos * omega).cos();
            }
        }
    }
    out
}

/// Multiplier (1 visible, 0 masked) for a `[C, D, H, W]` map at `factor`x downsampling.
fn visibility_multiplier(mask: &[bool], spec: &ViewSpec, channels: usize, factor: usize) -> Rc<Vec<f64>> {
    let [d, gh, gw] = spec.token_grid();
    let cell = MASK_PATCH / factor;
    let (h, w) = (gh * cell, gw * cell);
    let mut plane = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for i in 0..h {
            for j in 0..w {
                let t = (z * gh + i / cell) * gw + j / cell;
                plane.push(if mask[t] { 0.0 } else { 1.0 });
            }
        }
    }
    let mut out = Vec::with_capacity(channels * plane.len());
    for _ in 0..channels {
        out.extend_from_slice(&plane);
    }
    Rc::new(out)
}

/// `[C, D, H, W]` map to `[D * H * W, C]` rows.
fn map_to_rows(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[1, 2, 3, 0]);
    g.reshape(t, &[s[1] * s[2] * s[3], s[0]])
}

/// Convolutional downsampling branch of one view.
#[derive(Clone, Debug)]
pub struct ConvBranch {
    pub spec: ViewSpec,
    pub convs: [Conv; 3],
    pub norms: [ChannelNorm; 3],
    pub token: Conv,
    pub view_embed: ParamId,
}

impl ConvBranch {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig, spec: &ViewSpec) -> Self {
        let key = spec.view.key();
        let k = cfg.conv_kernel(spec.view);
        let pad = [k[0] / 2, 1, 1];
        let chans = [1, cfg.conv_channels[0], cfg.conv_channels[1], cfg.embed_dim];
        let conv = |store: &mut ParamStore, rng: &mut R, i: usize| {
            Conv::new(store, rng, &format!("enc.{key}.conv{}", i + 1), chans[i], chans[i + 1], k, [1, 2, 2], pad, false)
        };
        let c1 = conv(store, rng, 0);
        let n1 = ChannelNorm::new(store, rng, &format!("enc.{key}.norm1"), chans[1]);
        let c2 = conv(store, rng, 1);
        let n2 = ChannelNorm::new(store, rng, &format!("enc.{key}.norm2"), chans[2]);
        let c3 = conv(store, rng, 2);
        let n3 = ChannelNorm::new(store, rng, &format!("enc.{key}.norm3"), chans[3]);
        let token = Conv::new(
            store,
            rng,
            &format!("enc.{key}.token"),
            cfg.embed_dim,
            cfg.embed_dim,
            [1, TOKEN_PATCH, TOKEN_PATCH],
            [1, TOKEN_PATCH, TOKEN_PATCH],
            [0, 0, 0],
            true,
        );
        let view_embed = store.init(&format!("enc.{key}.view_embed"), &[cfg.embed_dim], Init::Normal(0.02), false, rng);
        Self { spec: spec.clone(), convs: [c1, c2, c3], norms: [n1, n2, n3], token, view_embed }
    }

    /// Stage features at 2x, 4x and 8x downsampling. Masked locations are
    /// re-zeroed after every stage so they cannot feed visible neighbours.
    pub fn conv_encode(&self, g: &mut Graph, x: Var, mask: &[bool]) -> [Var; 3] {
        let mut h = x;
        let mut out = Vec::with_capacity(3);
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            h = conv.forward(g, h);
            h = norm.forward(g, h);
            h = g.gelu(h);
            let channels = g.shape(h)[0];
            h = g.mul_const(h, visibility_multiplier(mask, &self.spec, channels, 2 << i));
            out.push(h);
        }
        [out[0], out[1], out[2]]
    }
}

/// Position of an encoder token: index of its view in the config and its slot in the view grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenIndex {
    pub view: usize,
    pub pos: usize,
}

/// Result of an encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Visible tokens after the transformer blocks (before the final norm), `[n_visible, E]`.
    pub tokens: Var,
    pub index: Vec<TokenIndex>,
    /// Conv stage features per view.
    pub stages: Vec<[Var; 3]>,
    /// Output of every transformer block.
    pub hidden: Vec<Var>,
}

/// Conv branches plus the shared transformer encoder.
#[derive(Clone, Debug)]
pub struct MultiViewEncoder {
    pub config: ModelConfig,
    pub branches: Vec<ConvBranch>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pos_embed: Vec<ArrayD<f64>>,
}

impl MultiViewEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let branches = config.views.iter().map(|s| ConvBranch::new(store, rng, config, s)).collect();
        let blocks = (0..config.encoder_depth)
            .map(|i| Block::new(store, rng, &format!("enc.block{i}"), config.embed_dim, config.encoder_heads, config.mlp_ratio))
            .collect();
        let norm = LayerNorm::new(store, rng, "enc.norm", config.embed_dim);
        let pos_embed = config
            .views
            .iter()
            .map(|s| sincos_embedding(config.embed_dim, s.token_grid(), s.view == View::Sax).into_dyn())
            .collect();
        Ok(Self { config: config.clone(), branches, blocks, norm, pos_embed })
    }

    fn check_inputs(&self, images: &[ArrayD<f64>], pattern: &MaskPattern) -> Result<(), ModelError> {
        pattern.check(&self.config)?;
        if images.len() != self.branches.len() {
            return Err(ModelError::PatternMismatch(format!("{} images for {} views", images.len(), self.branches.len())));
        }
        for (img, b) in images.iter().zip(&self.branches) {
            let expected = b.spec.input_shape().to_vec();
            if img.shape() != expected.as_slice() {
                return Err(ModelError::ShapeMismatch { view: b.spec.view, expected, actual: img.shape().to_vec() });
            }
        }
        Ok(())
    }

    /// Mask, conv-encode and tokenise every view; returns the concatenated
    /// visible tokens with positional and view embeddings added.
    pub fn embed(
        &self,
        g: &mut Graph,
        images: &[ArrayD<f64>],
        pattern: &MaskPattern,
    ) -> Result<(Var, Vec<TokenIndex>, Vec<[Var; 3]>), ModelError> {
        self.check_inputs(images, pattern)?;
        let mut visible = Vec::new();
        let mut index = Vec::new();
        let mut stages = Vec::new();
        for (v, (branch, img)) in self.branches.iter().zip(images).enumerate() {
            let masked = apply_mask(img, &pattern.masks[v], &branch.spec)?;
            let x = g.input(masked);
            let s = branch.conv_encode(g, x, &pattern.masks[v]);
            let tok = branch.token.forward(g, s[2]);
            let tok = map_to_rows(g, tok);
            let tok = g.add_const(tok, &self.pos_embed[v]);
            let ve = g.param(branch.view_embed);
            let tok = g.add_bias(tok, ve, 1);
            let idx = pattern.visible(v);
            index.extend(idx.iter().map(|&pos| TokenIndex { view: v, pos }));
            if !idx.is_empty() {
                visible.push(g.gather_rows(tok, Rc::new(idx)));
            }
            stages.push(s);
        }
        if visible.is_empty() {
            return Err(ModelError::PatternMismatch("every token is masked".into()));
        }
        Ok((g.concat(&visible, 0), index, stages))
    }

    /// Transformer blocks over a `[n, E]` token matrix; returns the output and every block output.
    pub fn encode_tokens(&self, g: &mut Graph, tokens: Var) -> (Var, Vec<Var>) {
        let mut x = tokens;
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(g, x);
            hidden.push(x);
        }
        (x, hidden)
    }

    pub fn forward(&self, g: &mut Graph, images: &[ArrayD<f64>], pattern: &MaskPattern) -> Result<EncoderOutput, ModelError> {
        let (tokens, index, stages) = self.embed(g, images, pattern)?;
        let (tokens, hidden) = self.encode_tokens(g, tokens);
        Ok(EncoderOutput { tokens, index, stages, hidden })
    }

    /// Final encoder normalisation.
    pub fn normed(&self, g: &mut Graph, tokens: Var) -> Var {
        self.norm.forward(g, tokens)
    }

    pub fn view_position(&self, view: View) -> Option<usize> {
        self.branches.iter().position(|b| b.spec.view == view)
    }
}

/// Fusion, shared transformer decoder and per-view pixel heads.
#[derive(Clone, Debug)]
pub struct MaeDecoder {
    pub fuse: Vec<[Linear; 2]>,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub view_embed: Vec<ParamId>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub heads: Vec<Linear>,
    pos_embed: Vec<ArrayD<f64>>,
}

impl MaeDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (e, d) = (config.embed_dim, config.decoder_dim);
        let [c1, c2] = config.conv_channels;
        let mut fuse = Vec::new();
        let mut view_embed = Vec::new();
        let mut heads = Vec::new();
        for s in &config.views {
            let key = s.view.key();
            fuse.push([
                Linear::new(store, rng, &format!("dec.{key}.fuse1"), c1, e, true, false),
                Linear::new(store, rng, &format!("dec.{key}.fuse2"), c2, e, true, false),
            ]);
        }
        let embed = Linear::new(store, rng, "dec.embed", e, d, true, false);
        let mask_token = store.init("dec.mask_token", &[d], Init::Normal(0.02), false, rng);
        for s in &config.views {
            view_embed.push(store.init(&format!("dec.{}.view_embed", s.view.key()), &[d], Init::Normal(0.02), false, rng));
        }
        let blocks = (0..config.decoder_depth)
            .map(|i| Block::new(store, rng, &format!("dec.block{i}"), d, config.decoder_heads, config.mlp_ratio))
            .collect();
        let norm = LayerNorm::new(store, rng, "dec.norm", d);
        for s in &config.views {
            heads.push(Linear::new(store, rng, &format!("dec.{}.head", s.view.key()), d, MASK_PATCH * MASK_PATCH, true, false));
        }
        let pos_embed = config
            .views
            .iter()
            .map(|s| sincos_embedding(d, s.token_grid(), s.view == View::Sax).into_dyn())
            .collect();
        Ok(Self { fuse, embed, mask_token, view_embed, blocks, norm, heads, pos_embed })
    }

    /// Reconstruct every view as a `[1, D, H, W]` image.
    pub fn forward(
        &self,
        g: &mut Graph,
        encoder: &MultiViewEncoder,
        enc: &EncoderOutput,
        pattern: &MaskPattern,
    ) -> Result<Vec<Var>, ModelError> {
        pattern.check(&encoder.config)?;
        if enc.stages.len() != self.fuse.len() || enc.index.len() != pattern.n_visible() {
            return Err(ModelError::PatternMismatch("encoder output does not match the pattern".into()));
        }
        let mut x = encoder.normed(g, enc.tokens);
        // multi-scale fusion: pool stage features onto the token grid and add them at visible tokens
        let mut fused = Vec::new();
        for (v, (stages, fuse)) in enc.stages.iter().zip(&self.fuse).enumerate() {
            let idx = pattern.visible(v);
            if idx.is_empty() {
                continue;
            }
            let idx = Rc::new(idx);
            let mut acc: Option<Var> = None;
            for (k, lin) in fuse.iter().enumerate() {
                let f = MASK_PATCH >> (k + 1);
                let pooled = g.avg_pool(stages[k], [1, f, f]);
                let rows = map_to_rows(g, pooled);
                let rows = g.gather_rows(rows, idx.clone());
                let p = lin.forward(g, rows);
                acc = Some(match acc {
                    Some(a) => g.add(a, p),
                    None => p,
                });
            }
            fused.push(acc.expect("two fusion scales"));
        }
        let fused = g.concat(&fused, 0);
        x = g.add(x, fused);
        let x = self.embed.forward(g, x);
        let d = g.shape(x)[1];

        let mask_token = g.param(self.mask_token);
        let mask_token = g.reshape(mask_token, &[1, d]);
        let mut seqs = Vec::new();
        let mut offset = 0;
        for (v, spec) in encoder.config.views.iter().enumerate() {
            let n = spec.n_tokens();
            let vis = pattern.visible(v);
            let indicator: Vec<f64> = pattern.masks[v].iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let ind = g.input(ArrayD::from_shape_vec(IxDyn(&[n, 1]), indicator).expect("indicator shape"));
            let mut seq = g.matmul(ind, mask_token);
            if !vis.is_empty() {
                let rows = g.slice(x, 0, offset, vis.len());
                offset += vis.len();
                let placed = g.scatter_rows(rows, Rc::new(vis), n);
                seq = g.add(seq, placed);
            }
            let seq = g.add_const(seq, &self.pos_embed[v]);
            let ve = g.param(self.view_embed[v]);
            seqs.push(g.add_bias(seq, ve, 1));
        }
        let mut h = g.concat(&seqs, 0);
        for b in &self.blocks {
            h = b.forward(g, h);
        }
        let h = self.norm.forward(g, h);
        let mut out = Vec::new();
        let mut offset = 0;
        for (v, spec) in encoder.config.views.iter().enumerate() {
            let n = spec.n_tokens();
            let rows = g.slice(h, 0, offset, n);
            offset += n;
            let px = self.heads[v].forward(g, rows);
            out.push(unpatchify(g, px, spec.token_grid()));
        }
        Ok(out)
    }
}

/// `[n, P*P]` patch rows to a `[1, D, H, W]` image (`P` = mask patch).
pub fn unpatchify(g: &mut Graph, rows: Var, grid: [usize; 3]) -> Var {
    let [d, gh, gw] = grid;
    let p = MASK_PATCH;
    let t = g.reshape(rows, &[d, gh, gw, p, p]);
    let t = g.permute(t, &[0, 1, 3, 2, 4]);
    g.reshape(t, &[1, d, gh * p, gw * p])
}

/// Inverse of [`unpatchify`] for plain arrays.
pub fn patchify(image: &ArrayD<f64>, grid: [usize; 3]) -> ArrayD<f64> {
    let [d, gh, gw] = grid;
    let p = MASK_PATCH;
    let mut out = ArrayD::zeros(IxDyn(&[d * gh * gw, p * p]));
    for z in 0..d {
        for i in 0..gh {
            for j in 0..gw {
                let t = (z * gh + i) * gw + j;
                for a in 0..p {
                    for b in 0..p {
                        out[[t, a * p + b]] = image[[0, z, i * p + a, j * p + b]];
                    }
                }
            }
        }
    }
    out
}

/// Mean squared error over masked pixels, averaged per view and then across
/// views with masked pixels. Fails when no view has a masked pixel.
pub fn masked_mse(
    g: &mut Graph,
    preds: &[Var],
    targets: &[ArrayD<f64>],
    pattern: &MaskPattern,
    specs: &[ViewSpec],
) -> Result<Var, ModelError> {
    if preds.len() != targets.len() || preds.len() != specs.len() || pattern.masks.len() != specs.len() {
        return Err(ModelError::PatternMismatch("prediction, target and view counts differ".into()));
    }
    let mut per_view = Vec::new();
    for (v, spec) in specs.iter().enumerate() {
        let ones = ArrayD::from_elem(IxDyn(&spec.input_shape()), 1.0);
        let kept = apply_mask(&ones, &pattern.masks[v], spec)?;
        let weight: Vec<f64> = kept.iter().map(|&k| 1.0 - k).collect();
        let n_masked: f64 = weight.iter().sum();
        if n_masked == 0.0 {
            continue;
        }
        if g.shape(preds[v]) != targets[v].shape() {
            return Err(ModelError::ShapeMismatch {
                view: spec.view,
                expected: targets[v].shape().to_vec(),
                actual: g.shape(preds[v]).to_vec(),
            });
        }
        let neg = targets[v].mapv(|t| -t);
        let diff = g.add_const(preds[v], &neg);
        let sq = g.square(diff);
        let sq = g.mul_const(sq, Rc::new(weight));
        let s = g.sum(sq);
        per_view.push(g.scale(s, 1.0 / n_masked));
    }
    if per_view.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let n = per_view.len() as f64;
    let mut total = per_view[0];
    for &l in &per_view[1..] {
        total = g.add(total, l);
    }
    Ok(g.scale(total, 1.0 / n))
}

/// Encoder and decoder with their parameters.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: MultiViewEncoder,
    pub decoder: MaeDecoder,
}

impl MaeModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = MultiViewEncoder::new(&mut store, &mut rng, config)?;
        let decoder = MaeDecoder::new(&mut store, &mut rng, config)?;
        Ok(Self { config: config.clone(), store, encoder, decoder })
    }

    /// Reconstructions of every view plus the encoder output.
    pub fn reconstruct(
        &self,
        g: &mut Graph,
        images: &[ArrayD<f64>],
        pattern: &MaskPattern,
    ) -> Result<(Vec<Var>, EncoderOutput), ModelError> {
        let enc = self.encoder.forward(g, images, pattern)?;
        let rec = self.decoder.forward(g, &self.encoder, &enc, pattern)?;
        Ok((rec, enc))
    }

    /// Masked reconstruction loss of one sample.
    pub fn loss(&self, g: &mut Graph, images: &[ArrayD<f64>], pattern: &MaskPattern) -> Result<Var, ModelError> {
        let (rec, _) = self.reconstruct(g, images, pattern)?;
        masked_mse(g, &rec, images, pattern, &self.config.views)
    }
}
