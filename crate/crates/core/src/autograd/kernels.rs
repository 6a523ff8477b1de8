//! Dense kernels shared by the forward and backward passes.
//!
//! All tensors are row-major and contiguous. Spatial tensors use the
//! `[C, D, H, W]` layout; 2D images are carried with `D = 1`.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Split `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = alpha * op(a) * op(b) + beta * c` on raw row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let a = ArrayView2::from_shape((a_rows, a_cols), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((b_rows, b_cols), b).expect("gemm rhs shape");
    let a = if trans_a { a.reversed_axes() } else { a };
    let b = if trans_b { b.reversed_axes() } else { b };
    let mut c = ArrayViewMut2::from_shape((a.nrows(), b.ncols()), c).expect("gemm out shape");
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub inp: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, inp: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = inp[a] + 2 * pad[a];
            assert!(span >= kernel[a], "conv kernel larger than padded input on axis {a}");
            out[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Self { cin, inp, kernel, stride, pad, out }
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn col_cols(&self) -> usize {
        self.out.iter().product()
    }
}

/// Unfold `x` (`[cin, D, H, W]`) into a `[cin*kd*kh*kw, Do*Ho*Wo]` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [d, h, w] = g.inp;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out;
    let cols = g.col_cols();
    let mut col = vec![0.0; g.col_rows() * cols];
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            idx += oh * ow;
                            continue;
                        }
                        let iz = iz as usize;
                        for y in 0..oh {
                            let iy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let base = (iz * h + iy as usize) * w;
                            for xo in 0..ow {
                                let ix = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[idx] = xc[base + ix as usize];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back into `[cin, D, H, W]`.
pub(crate) fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let [d, h, w] = g.inp;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.out;
    let cols = g.col_cols();
    let mut x = vec![0.0; g.cin * d * h * w];
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut idx = 0;
                    for z in 0..od {
                        let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            idx += oh * ow;
                            continue;
                        }
                        let iz = iz as usize;
                        for y in 0..oh {
                            let iy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let base = (iz * h + iy as usize) * w;
                            for xo in 0..ow {
                                let ix = (xo * g.stride[2] + e) as isize - g.pad[2] as isize;
                                if ix >= 0 && ix < w as isize {
                                    xc[base + ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

/// Rearrange `[co*kd*kh*kw, D*H*W]` (per-input-pixel kernel responses) into the
/// upsampled `[co, D*kd, H*kh, W*kw]` image of a stride == kernel transposed conv.
pub(crate) fn spread_blocks(y: &[f64], co: usize, inp: [usize; 3], k: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = inp;
    let [kd, kh, kw] = k;
    let (od, oh, ow) = (d * kd, h * kh, w * kw);
    let p = d * h * w;
    let mut out = vec![0.0; co * od * oh * ow];
    for c in 0..co {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &y[row * p..(row + 1) * p];
                    for z in 0..d {
                        for yy in 0..h {
                            let dst_base = ((c * od + z * kd + a) * oh + yy * kh + b) * ow + e;
                            let src_base = (z * h + yy) * w;
                            for xx in 0..w {
                                out[dst_base + xx * kw] = src[src_base + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`spread_blocks`].
pub(crate) fn gather_blocks(out: &[f64], co: usize, inp: [usize; 3], k: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = inp;
    let [kd, kh, kw] = k;
    let (od, oh, ow) = (d * kd, h * kh, w * kw);
    let p = d * h * w;
    let mut y = vec![0.0; co * kd * kh * kw * p];
    for c in 0..co {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut y[row * p..(row + 1) * p];
                    for z in 0..d {
                        for yy in 0..h {
                            let src_base = ((c * od + z * kd + a) * oh + yy * kh + b) * ow + e;
                            let dst_base = (z * h + yy) * w;
                            for xx in 0..w {
                                dst[dst_base + xx] = out[src_base + xx * kw];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Non-overlapping average pooling over `[C, D, H, W]`.
pub(crate) fn avg_pool(x: &[f64], c: usize, inp: [usize; 3], k: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = inp;
    let [kd, kh, kw] = k;
    let (od, oh, ow) = (d / kd, h / kh, w / kw);
    let norm = 1.0 / (kd * kh * kw) as f64;
    let mut out = vec![0.0; c * od * oh * ow];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let src = ((ch * d + z) * h + y) * w;
                let dst = ((ch * od + z / kd) * oh + y / kh) * ow;
                for xx in 0..w {
                    out[dst + xx / kw] += x[src + xx] * norm;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &[f64], c: usize, inp: [usize; 3], k: [usize; 3]) -> Vec<f64> {
    let [d, h, w] = inp;
    let [kd, kh, kw] = k;
    let (od, oh, ow) = (d / kd, h / kh, w / kw);
    let norm = 1.0 / (kd * kh * kw) as f64;
    let mut dx = vec![0.0; c * d * h * w];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let dst = ((ch * d + z) * h + y) * w;
                let src = ((ch * od + z / kd) * oh + y / kh) * ow;
                for xx in 0..w {
                    dx[dst + xx] = dy[src + xx / kw] * norm;
                }
            }
        }
    }
    dx
}

/// General axis permutation of a contiguous buffer.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for a in (0..nd.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let mut counter = vec![0usize; nd];
    let mut offset = 0usize;
    let last = nd - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    loop {
        for i in 0..inner_len {
            out.push(x[offset + i * inner_stride]);
        }
        // advance the outer counters
        let mut a = last;
        loop {
            if a == 0 {
                return (out, out_shape);
            }
            a -= 1;
            counter[a] += 1;
            offset += strides[a];
            if counter[a] < out_shape[a] {
                break;
            }
            offset -= strides[a] * out_shape[a];
            counter[a] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
