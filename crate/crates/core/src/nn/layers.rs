use rand::Rng;

use super::{Init, ParamId, ParamStore};
use crate::autograd::{Graph, Var};

/// `y = x W + b` over the last axis of a 2-D input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        decay: bool,
    ) -> Self {
        let w = store.init(
            &format!("{name}.w"),
            &[d_in, d_out],
            Init::XavierUniform { fan_in: d_in, fan_out: d_out },
            decay,
            rng,
        );
        let b = bias.then(|| store.init(&format!("{name}.b"), &[d_out], Init::Zeros, false, rng));
        Self { w, b, d_in, d_out }
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b, 1)
            }
            None => y,
        }
    }
}

/// Affine layer normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        let gamma = store.init(&format!("{name}.gamma"), &[dim], Init::Ones, false, rng);
        let beta = store.init(&format!("{name}.beta"), &[dim], Init::Zeros, false, rng);
        Self { gamma, beta, eps: 1e-6 }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let last = g.shape(x).len() - 1;
        let y = g.layer_norm(x, self.eps);
        let gamma = g.param(self.gamma);
        let y = g.mul_gain(y, gamma, last);
        let beta = g.param(self.beta);
        g.add_bias(y, beta, last)
    }
}

/// Layer normalisation across channels at every voxel of a `[C, D, H, W]` map.
#[derive(Clone, Debug)]
pub struct ChannelNorm(pub LayerNorm);

impl ChannelNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        Self(LayerNorm::new(store, rng, name, channels))
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let t = g.permute(x, &[1, 2, 3, 0]);
        let t = g.reshape(t, &[s[1] * s[2] * s[3], s[0]]);
        let t = self.0.forward(g, t);
        let t = g.reshape(t, &[s[1], s[2], s[3], s[0]]);
        g.permute(t, &[3, 0, 1, 2])
    }
}

/// Per-channel normalisation over all voxels of a `[C, D, H, W]` map.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Self {
        let gamma = store.init(&format!("{name}.gamma"), &[channels], Init::Ones, false, rng);
        let beta = store.init(&format!("{name}.beta"), &[channels], Init::Zeros, false, rng);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let t = g.reshape(x, &[s[0], s[1] * s[2] * s[3]]);
        let t = g.layer_norm(t, 1e-5);
        let t = g.reshape(t, &s);
        let gamma = g.param(self.gamma);
        let t = g.mul_gain(t, gamma, 0);
        let beta = g.param(self.beta);
        g.add_bias(t, beta, 0)
    }
}

/// Convolution over `[C, D, H, W]` maps.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let w = store.init(
            &format!("{name}.w"),
            &[cout, cin, kernel[0], kernel[1], kernel[2]],
            Init::KaimingNormal { fan_in },
            false,
            rng,
        );
        let b = bias.then(|| store.init(&format!("{name}.b"), &[cout], Init::Zeros, false, rng));
        Self { w, b, stride, pad }
    }

    pub fn param_count(cin: usize, cout: usize, kernel: [usize; 3], bias: bool) -> usize {
        cin * cout * kernel.iter().product::<usize>() + if bias { cout } else { 0 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.conv(x, w, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b, 0)
            }
            None => y,
        }
    }
}

/// Transposed convolution with stride equal to its kernel.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvTranspose {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
    ) -> Self {
        let w = store.init(
            &format!("{name}.w"),
            &[cin, cout, kernel[0], kernel[1], kernel[2]],
            Init::KaimingNormal { fan_in: cin },
            false,
            rng,
        );
        let b = store.init(&format!("{name}.b"), &[cout], Init::Zeros, false, rng);
        Self { w, b }
    }

    pub fn param_count(cin: usize, cout: usize, kernel: [usize; 3]) -> usize {
        cin * cout * kernel.iter().product::<usize>() + cout
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.conv_transpose(x, w);
        let b = g.param(self.b);
        g.add_bias(y, b, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head self-attention over a `[n, dim]` token matrix.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "attention dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true, true),
            heads,
        }
    }

    /// Returns the output and the `[heads, n, n]` attention probabilities.
    pub fn forward_with_probs(&self, g: &mut Graph, x: Var) -> (Var, Var) {
        let s = g.shape(x).to_vec();
        let (n, dim) = (s[0], s[1]);
        let dh = dim / self.heads;
        let qkv = self.qkv.forward(g, x);
        let qkv = g.reshape(qkv, &[n, 3, self.heads, dh]);
        let qkv = g.permute(qkv, &[1, 2, 0, 3]);
        let q = g.slice(qkv, 0, 0, 1);
        let k = g.slice(qkv, 0, 1, 1);
        let v = g.slice(qkv, 0, 2, 1);
        let q = g.reshape(q, &[self.heads, n, dh]);
        let k = g.reshape(k, &[self.heads, n, dh]);
        let v = g.reshape(v, &[self.heads, n, dh]);
        let scores = g.matmul_t(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores, 2);
        let out = g.matmul(probs, v);
        let out = g.permute(out, &[1, 0, 2]);
        let out = g.reshape(out, &[n, dim]);
        (self.proj.forward(g, out), probs)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.forward_with_probs(g, x).0
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, rng, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, rng, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        }
    }

    /// Closed-form parameter count of one block.
    pub fn param_count(dim: usize, mlp_ratio: usize) -> usize {
        let hidden = dim * mlp_ratio;
        2 * LayerNorm::param_count(dim)
            + Linear::param_count(dim, 3 * dim, true)
            + Linear::param_count(dim, dim, true)
            + Linear::param_count(dim, hidden, true)
            + Linear::param_count(hidden, dim, true)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.norm1.forward(g, x);
        let h = self.attn.forward(g, h);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, x);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }
}
