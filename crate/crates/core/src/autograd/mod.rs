//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live in
//! a [`ParamStore`](crate::nn::ParamStore) and are bound lazily into the graph
//! the first time a layer asks for them. After [`Graph::backward`] the
//! gradients of every bound parameter can be collected by id.

mod backward;
pub mod gradcheck;
pub(crate) mod kernels;

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::nn::{ParamId, ParamStore};
use kernels::{axis_split, ConvGeom};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    /// tanh approximation of GELU.
    Gelu,
    Sigmoid,
    Exp,
    Ln,
    Abs,
    Square,
    Sqrt,
    Tanh,
    LeakyRelu(f64),
    /// Wing loss kernel `w ln(1 + |x|/eps)` inside `|x| < w`, `|x| - C` outside.
    Wing { w: f64, eps: f64 },
}

impl Unary {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Wing { w, eps } => {
                let a = x.abs();
                if a < w {
                    w * (1.0 + a / eps).ln()
                } else {
                    a - (w - w * (1.0 + w / eps).ln())
                }
            }
        }
    }

    /// Derivative given the input `x` and output `y`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let inner = GELU_K * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Abs => sign(x),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Tanh => 1.0 - y * y,
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Wing { w, eps } => {
                let a = x.abs();
                if a < w {
                    sign(x) * w / (eps + a)
                } else {
                    sign(x)
                }
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `x + b` with the 1-D `b` broadcast along `axis` of `x`.
    Bias { x: Var, b: Var, axis: usize },
    /// `x * g` with the 1-D `g` broadcast along `axis` of `x`.
    Gain { x: Var, g: Var, axis: usize },
    Scale(Var, f64),
    /// `x + constant`; gradient passes straight through.
    Offset(Var),
    MulConst(Var, Rc<Vec<f64>>),
    Unary(Var, Unary),
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Conv { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose { x: Var, w: Var, kernel: [usize; 3] },
    AvgPool { x: Var, kernel: [usize; 3] },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    GatherRows { x: Var, idx: Rc<Vec<usize>> },
    ScatterRows { x: Var, idx: Rc<Vec<usize>> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub op: Op,
    pub needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: None, bound: HashMap::new() }
    }

    /// A graph whose layers can pull parameters from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self { nodes: Vec::new(), params: Some(store), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on tensor of shape {:?}", val.shape());
        val.iter().copied().next().unwrap_or(0.0)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf, false)
    }

    /// Input leaf whose gradient is tracked.
    pub fn input_with_grad(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf, true)
    }

    /// Bind a parameter from the attached store (idempotent per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store attached");
        let value = store.value(id).clone();
        let v = self.push(value, Op::Leaf, true);
        self.bound.insert(id, v);
        v
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        out.sort_by_key(|&(_, v)| v);
        out
    }

    fn binary_shape_check(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data: Vec<f64> = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = ArrayD::from_shape_vec(IxDyn(va.shape()), data).expect("zip shape");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "add");
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "sub");
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "mul");
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "div");
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn broadcast(&mut self, x: Var, b: Var, axis: usize, mul: bool) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let bv = self.value(b);
        assert_eq!(bv.len(), len, "broadcast operand length must match axis {axis} of {shape:?}");
        let bvals: Vec<f64> = bv.iter().copied().collect();
        let mut data: Vec<f64> = self.value(x).iter().copied().collect();
        for o in 0..outer {
            for (k, &bk) in bvals.iter().enumerate() {
                let base = (o * len + k) * inner;
                for v in &mut data[base..base + inner] {
                    if mul {
                        *v *= bk;
                    } else {
                        *v += bk;
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("broadcast shape");
        let ng = self.ng(x) || self.ng(b);
        let op = if mul { Op::Gain { x, g: b, axis } } else { Op::Bias { x, b, axis } };
        self.push(value, op, ng)
    }

    /// `x + b`, broadcasting the 1-D `b` along `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Var {
        self.broadcast(x, b, axis, false)
    }

    /// `x * g`, broadcasting the 1-D `g` along `axis`.
    pub fn mul_gain(&mut self, x: Var, g: Var, axis: usize) -> Var {
        self.broadcast(x, g, axis, true)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).mapv(|v| v * s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &ArrayD<f64>) -> Var {
        assert_eq!(self.shape(x), c.shape(), "add_const: shape mismatch");
        let value = self.value(x) + c;
        let ng = self.ng(x);
        self.push(value, Op::Offset(x), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| v + c);
        let ng = self.ng(x);
        self.push(value, Op::Offset(x), ng)
    }

    /// Elementwise product with a constant tensor of the same element count.
    pub fn mul_const(&mut self, x: Var, c: Rc<Vec<f64>>) -> Var {
        assert_eq!(self.value(x).len(), c.len(), "mul_const: length mismatch");
        let shape = self.shape(x).to_vec();
        let data: Vec<f64> = self.value(x).iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let value = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("mul_const shape");
        let ng = self.ng(x);
        self.push(value, Op::MulConst(x, c), ng)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let value = self.value(x).mapv(|v| f.apply(v));
        let ng = self.ng(x);
        self.push(value, Op::Unary(x, f), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Matrix product of 2-D or batched 3-D operands, optionally transposing
    /// the trailing two axes of either side.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "matmul: rank mismatch {sa:?} vs {sb:?}");
        let value = match sa.len() {
            2 => {
                let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                assert_eq!(ka, kb, "matmul: inner dims {sa:?} x {sb:?}");
                let mut out = vec![0.0; m * n];
                kernels::gemm(
                    self.value(a).as_slice().expect("contiguous"),
                    sa[0],
                    sa[1],
                    trans_a,
                    self.value(b).as_slice().expect("contiguous"),
                    sb[0],
                    sb[1],
                    trans_b,
                    &mut out,
                    0.0,
                );
                ArrayD::from_shape_vec(IxDyn(&[m, n]), out).expect("matmul shape")
            }
            3 => {
                assert_eq!(sa[0], sb[0], "batched matmul: batch mismatch");
                let (m, ka) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                assert_eq!(ka, kb, "batched matmul: inner dims {sa:?} x {sb:?}");
                let batch = sa[0];
                let mut out = vec![0.0; batch * m * n];
                let va = self.value(a).as_slice().expect("contiguous");
                let vb = self.value(b).as_slice().expect("contiguous");
                let (sza, szb) = (sa[1] * sa[2], sb[1] * sb[2]);
                for i in 0..batch {
                    kernels::gemm(
                        &va[i * sza..(i + 1) * sza],
                        sa[1],
                        sa[2],
                        trans_a,
                        &vb[i * szb..(i + 1) * szb],
                        sb[1],
                        sb[2],
                        trans_b,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
                ArrayD::from_shape_vec(IxDyn(&[batch, m, n]), out).expect("bmm shape")
            }
            r => panic!("matmul: unsupported rank {r}"),
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, trans_a, trans_b }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(perm.len(), shape.len(), "permute: rank mismatch");
        let (data, out_shape) =
            kernels::permute(self.value(x).as_slice().expect("contiguous"), &shape, perm);
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), data).expect("permute shape");
        let ng = self.ng(x);
        self.push(value, Op::Permute(x, perm.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let src = self.value(x);
        assert_eq!(
            src.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {shape:?}",
            src.shape()
        );
        let value = ArrayD::from_shape_vec(IxDyn(shape), src.iter().copied().collect())
            .expect("reshape shape");
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let value = softmax_along(self.value(x), axis, false);
        let ng = self.ng(x);
        self.push(value, Op::Softmax { x, axis }, ng)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let value = softmax_along(self.value(x), axis, true);
        let ng = self.ng(x);
        self.push(value, Op::LogSoftmax { x, axis }, ng)
    }

    /// Standardise over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on scalar");
        let src = self.value(x).as_slice().expect("contiguous");
        let rows = src.len() / d.max(1);
        let mut out = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("layer_norm shape");
        let ng = self.ng(x);
        self.push(value, Op::LayerNorm { x, rstd }, ng)
    }

    /// Cross-correlation of `x: [Ci, D, H, W]` with `w: [Co, Ci, kd, kh, kw]`.
    pub fn conv(&mut self, x: Var, w: Var, stride: [usize; 3], pad: [usize; 3]) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4, "conv input must be [C, D, H, W], got {sx:?}");
        assert_eq!(sw.len(), 5, "conv weight must be [Co, Ci, kd, kh, kw], got {sw:?}");
        assert_eq!(sx[0], sw[1], "conv: channel mismatch {sx:?} vs {sw:?}");
        let geom = ConvGeom::new(sx[0], [sx[1], sx[2], sx[3]], [sw[2], sw[3], sw[4]], stride, pad);
        let col = kernels::im2col(self.value(x).as_slice().expect("contiguous"), &geom);
        let co = sw[0];
        let p = geom.col_cols();
        let mut out = vec![0.0; co * p];
        kernels::gemm(
            self.value(w).as_slice().expect("contiguous"),
            co,
            geom.col_rows(),
            false,
            &col,
            geom.col_rows(),
            p,
            false,
            &mut out,
            0.0,
        );
        let value = ArrayD::from_shape_vec(IxDyn(&[co, geom.out[0], geom.out[1], geom.out[2]]), out)
            .expect("conv shape");
        let ng = self.ng(x) || self.ng(w);
        self.push(value, Op::Conv { x, w, geom }, ng)
    }

    /// Transposed convolution with stride equal to the kernel size.
    /// `x: [Ci, D, H, W]`, `w: [Ci, Co, kd, kh, kw]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert_eq!(sx.len(), 4, "conv_transpose input must be [C, D, H, W]");
        assert_eq!(sw.len(), 5, "conv_transpose weight must be [Ci, Co, kd, kh, kw]");
        assert_eq!(sx[0], sw[0], "conv_transpose: channel mismatch");
        let (ci, co) = (sw[0], sw[1]);
        let kernel = [sw[2], sw[3], sw[4]];
        let kk: usize = kernel.iter().product();
        let inp = [sx[1], sx[2], sx[3]];
        let p: usize = inp.iter().product();
        let mut y = vec![0.0; co * kk * p];
        kernels::gemm(
            self.value(w).as_slice().expect("contiguous"),
            ci,
            co * kk,
            true,
            self.value(x).as_slice().expect("contiguous"),
            ci,
            p,
            false,
            &mut y,
            0.0,
        );
        let out = kernels::spread_blocks(&y, co, inp, kernel);
        let shape = [co, inp[0] * kernel[0], inp[1] * kernel[1], inp[2] * kernel[2]];
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("conv_transpose shape");
        let ng = self.ng(x) || self.ng(w);
        self.push(value, Op::ConvTranspose { x, w, kernel }, ng)
    }

    /// Non-overlapping average pooling of `[C, D, H, W]`.
    pub fn avg_pool(&mut self, x: Var, kernel: [usize; 3]) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "avg_pool input must be [C, D, H, W]");
        for a in 0..3 {
            assert_eq!(s[a + 1] % kernel[a], 0, "avg_pool: axis {} of {s:?} not divisible", a + 1);
        }
        let out = kernels::avg_pool(
            self.value(x).as_slice().expect("contiguous"),
            s[0],
            [s[1], s[2], s[3]],
            kernel,
        );
        let shape = [s[0], s[1] / kernel[0], s[2] / kernel[1], s[3] / kernel[2]];
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("avg_pool shape");
        let ng = self.ng(x);
        self.push(value, Op::AvgPool { x, kernel }, ng)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).as_slice().expect("contiguous");
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("sum_axis shape");
        let ng = self.ng(x);
        self.push(value, Op::SumAxis { x, axis }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Select rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "gather_rows expects [n, d]");
        let src = self.value(x).as_slice().expect("contiguous");
        let d = s[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            assert!(i < s[0], "gather_rows: index {i} out of {}", s[0]);
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[idx.len(), d]), out).expect("gather shape");
        let ng = self.ng(x);
        self.push(value, Op::GatherRows { x, idx }, ng)
    }

    /// Place the rows of `x` at `idx` in an `[n, d]` zero tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, n: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "scatter_rows expects [k, d]");
        assert_eq!(s[0], idx.len(), "scatter_rows: index count mismatch");
        let d = s[1];
        let src = self.value(x).as_slice().expect("contiguous");
        let mut out = vec![0.0; n * d];
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < n, "scatter_rows: index {i} out of {n}");
            for j in 0..d {
                out[i * d + j] += src[r * d + j];
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, d]), out).expect("scatter shape");
        let ng = self.ng(x);
        self.push(value, Op::ScatterRows { x, idx }, ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for a in 0..s.len() {
                if a != axis {
                    assert_eq!(s[a], first[a], "concat: shape mismatch on axis {a}");
                }
            }
            out_shape[axis] += s[axis];
        }
        let (outer, total, inner) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut off = 0;
        for &x in xs {
            let len = self.shape(x)[axis];
            let src = self.value(x).as_slice().expect("contiguous");
            for o in 0..outer {
                let dst = (o * total + off) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            off += len;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("concat shape");
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(value, Op::Concat { xs: xs.to_vec(), axis }, ng)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[axis], "slice out of range on axis {axis} of {shape:?}");
        let (outer, total, inner) = axis_split(&shape, axis);
        let src = self.value(x).as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), out).expect("slice shape");
        let ng = self.ng(x);
        self.push(value, Op::Slice { x, axis, start }, ng)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        backward::run(&self.nodes, loss)
    }

    /// Gradients of every parameter bound in this graph.
    pub fn param_grads(&self, grads: &Grads) -> Vec<(ParamId, ArrayD<f64>)> {
        self.bound_params()
            .into_iter()
            .map(|(p, v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(self.shape(v))));
                (p, g)
            })
            .collect()
    }
}

pub(crate) fn softmax_along(x: &ArrayD<f64>, axis: usize, log: bool) -> ArrayD<f64> {
    let shape = x.shape().to_vec();
    let (outer, len, inner) = axis_split(&shape, axis);
    let src = x.as_slice().expect("contiguous");
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..len {
                m = m.max(src[at(k)]);
            }
            let mut z = 0.0;
            for k in 0..len {
                z += (src[at(k)] - m).exp();
            }
            let lz = z.ln();
            for k in 0..len {
                let v = src[at(k)] - m;
                out[at(k)] = if log { v - lz } else { v.exp() / z };
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("softmax shape")
}
