use ndarray::{ArrayD, IxDyn};

use super::kernels::{self, axis_split};
use super::{Grads, Node, Op, Var};

fn accumulate(grads: &mut [Option<ArrayD<f64>>], nodes: &[Node], v: Var, g: ArrayD<f64>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[v.0].value.shape(), "gradient shape for node {}", v.0);
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("gradient shape")
}

pub(super) fn run(nodes: &[Node], loss: Var) -> Grads {
    let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
    assert_eq!(nodes[loss.0].value.len(), 1, "backward from a non-scalar node");
    grads[loss.0] = Some(ArrayD::from_elem(IxDyn(nodes[loss.0].value.shape()), 1.0));

    for i in (0..=loss.0).rev() {
        let node = &nodes[i];
        if !node.needs_grad {
            continue;
        }
        let dy = match grads[i].take() {
            Some(g) => g,
            None => continue,
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {
                grads[i] = Some(dy);
                continue;
            }
            Op::Add(a, b) => {
                accumulate(&mut grads, nodes, *b, dy.clone());
                accumulate(&mut grads, nodes, *a, dy);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, nodes, *b, dy.mapv(|v| -v));
                accumulate(&mut grads, nodes, *a, dy);
            }
            Op::Mul(a, b) => {
                let va = &nodes[a.0].value;
                let vb = &nodes[b.0].value;
                if nodes[a.0].needs_grad {
                    accumulate(&mut grads, nodes, *a, &dy * vb);
                }
                if nodes[b.0].needs_grad {
                    accumulate(&mut grads, nodes, *b, &dy * va);
                }
            }
            Op::Div(a, b) => {
                let vb = &nodes[b.0].value;
                if nodes[a.0].needs_grad {
                    accumulate(&mut grads, nodes, *a, &dy / vb);
                }
                if nodes[b.0].needs_grad {
                    // d(a/b)/db = -out / b
                    let g = -(&dy * out) / vb;
                    accumulate(&mut grads, nodes, *b, g);
                }
            }
            Op::Bias { x, b, axis } => {
                if nodes[b.0].needs_grad {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let d = dy.as_slice().expect("contiguous");
                    let mut gb = vec![0.0; len];
                    for o in 0..outer {
                        for (k, slot) in gb.iter_mut().enumerate() {
                            let base = (o * len + k) * inner;
                            *slot += d[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads, nodes, *b, from_vec(nodes[b.0].value.shape(), gb));
                }
                accumulate(&mut grads, nodes, *x, dy);
            }
            Op::Gain { x, g, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let d = dy.as_slice().expect("contiguous");
                let gv: Vec<f64> = nodes[g.0].value.iter().copied().collect();
                if nodes[g.0].needs_grad {
                    let xv = nodes[x.0].value.as_slice().expect("contiguous");
                    let mut gg = vec![0.0; len];
                    for o in 0..outer {
                        for (k, slot) in gg.iter_mut().enumerate() {
                            let base = (o * len + k) * inner;
                            *slot += d[base..base + inner]
                                .iter()
                                .zip(&xv[base..base + inner])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                    accumulate(&mut grads, nodes, *g, from_vec(nodes[g.0].value.shape(), gg));
                }
                if nodes[x.0].needs_grad {
                    let mut gx = d.to_vec();
                    for o in 0..outer {
                        for (k, &gk) in gv.iter().enumerate() {
                            let base = (o * len + k) * inner;
                            for v in &mut gx[base..base + inner] {
                                *v *= gk;
                            }
                        }
                    }
                    accumulate(&mut grads, nodes, *x, from_vec(out.shape(), gx));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(&mut grads, nodes, *x, dy.mapv(|v| v * s));
            }
            Op::Offset(x) => accumulate(&mut grads, nodes, *x, dy),
            Op::MulConst(x, c) => {
                let g: Vec<f64> = dy.iter().zip(c.iter()).map(|(a, b)| a * b).collect();
                accumulate(&mut grads, nodes, *x, from_vec(out.shape(), g));
            }
            Op::Unary(x, f) => {
                let xv = &nodes[x.0].value;
                let g: Vec<f64> = dy
                    .iter()
                    .zip(xv.iter())
                    .zip(out.iter())
                    .map(|((d, &xi), &yi)| d * f.derivative(xi, yi))
                    .collect();
                accumulate(&mut grads, nodes, *x, from_vec(out.shape(), g));
            }
            Op::MatMul { a, b, trans_a, trans_b } => {
                matmul_backward(nodes, &mut grads, *a, *b, *trans_a, *trans_b, &dy);
            }
            Op::Permute(x, perm) => {
                let (g, shape) = kernels::permute(
                    dy.as_slice().expect("contiguous"),
                    out.shape(),
                    &kernels::inverse_perm(perm),
                );
                accumulate(&mut grads, nodes, *x, from_vec(&shape, g));
            }
            Op::Reshape(x) => {
                let shape = nodes[x.0].value.shape().to_vec();
                let g = from_vec(&shape, dy.iter().copied().collect());
                accumulate(&mut grads, nodes, *x, g);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.as_slice().expect("contiguous");
                let d = dy.as_slice().expect("contiguous");
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| d[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            g[at(k)] = y[at(k)] * (d[at(k)] - dot);
                        }
                    }
                }
                accumulate(&mut grads, nodes, *x, from_vec(out.shape(), g));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.as_slice().expect("contiguous");
                let d = dy.as_slice().expect("contiguous");
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let total: f64 = (0..len).map(|k| d[at(k)]).sum();
                        for k in 0..len {
                            g[at(k)] = d[at(k)] - y[at(k)].exp() * total;
                        }
                    }
                }
                accumulate(&mut grads, nodes, *x, from_vec(out.shape(), g));
            }
            Op::LayerNorm { x, rstd } => {
                let dim = *out.shape().last().expect("layer_norm rank");
                let y = out.as_slice().expect("contiguous");
                let d = dy.as_slice().expect("contiguous");
                let mut g = vec![0.0; y.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let yr = &y[r * dim..(r + 1) * dim];
                    let dr = &d[r * dim..(r + 1) * dim];
                    let mean_d = dr.iter().sum::<f64>() / dim as f64;
                    let mean_dy = dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                    for k in 0..dim {
                        g[r * dim + k] = rs * (dr[k] - mean_d - yr[k] * mean_dy);
                    }
                }
                accumulate(&mut grads, nodes, *x, from_vec(out.shape(), g));
            }
            Op::Conv { x, w, geom } => {
                let xv = nodes[x.0].value.as_slice().expect("contiguous");
                let wv = nodes[w.0].value.as_slice().expect("contiguous");
                let co = nodes[w.0].value.shape()[0];
                let (k, p) = (geom.col_rows(), geom.col_cols());
                let d = dy.as_slice().expect("contiguous");
                if nodes[w.0].needs_grad {
                    let col = kernels::im2col(xv, geom);
                    let mut gw = vec![0.0; co * k];
                    kernels::gemm(d, co, p, false, &col, k, p, true, &mut gw, 0.0);
                    accumulate(&mut grads, nodes, *w, from_vec(nodes[w.0].value.shape(), gw));
                }
                if nodes[x.0].needs_grad {
                    let mut gcol = vec![0.0; k * p];
                    kernels::gemm(wv, co, k, true, d, co, p, false, &mut gcol, 0.0);
                    let gx = kernels::col2im(&gcol, geom);
                    accumulate(&mut grads, nodes, *x, from_vec(nodes[x.0].value.shape(), gx));
                }
            }
            Op::ConvTranspose { x, w, kernel } => {
                let xs = nodes[x.0].value.shape().to_vec();
                let ws = nodes[w.0].value.shape().to_vec();
                let (ci, co) = (ws[0], ws[1]);
                let kk: usize = kernel.iter().product();
                let inp = [xs[1], xs[2], xs[3]];
                let p: usize = inp.iter().product();
                let gy = kernels::gather_blocks(dy.as_slice().expect("contiguous"), co, inp, *kernel);
                if nodes[w.0].needs_grad {
                    let xv = nodes[x.0].value.as_slice().expect("contiguous");
                    let mut gw = vec![0.0; ci * co * kk];
                    kernels::gemm(xv, ci, p, false, &gy, co * kk, p, true, &mut gw, 0.0);
                    accumulate(&mut grads, nodes, *w, from_vec(&ws, gw));
                }
                if nodes[x.0].needs_grad {
                    let wv = nodes[w.0].value.as_slice().expect("contiguous");
                    let mut gx = vec![0.0; ci * p];
                    kernels::gemm(wv, ci, co * kk, false, &gy, co * kk, p, false, &mut gx, 0.0);
                    accumulate(&mut grads, nodes, *x, from_vec(&xs, gx));
                }
            }
            Op::AvgPool { x, kernel } => {
                let xs = nodes[x.0].value.shape().to_vec();
                let g = kernels::avg_pool_backward(
                    dy.as_slice().expect("contiguous"),
                    xs[0],
                    [xs[1], xs[2], xs[3]],
                    *kernel,
                );
                accumulate(&mut grads, nodes, *x, from_vec(&xs, g));
            }
            Op::SumAxis { x, axis } => {
                let xs = nodes[x.0].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&xs, *axis);
                let d = dy.as_slice().expect("contiguous");
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        g[base..base + inner].copy_from_slice(&d[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads, nodes, *x, from_vec(&xs, g));
            }
            Op::SumAll(x) => {
                let s = dy.iter().copied().next().unwrap_or(0.0);
                let g = ArrayD::from_elem(IxDyn(nodes[x.0].value.shape()), s);
                accumulate(&mut grads, nodes, *x, g);
            }
            Op::GatherRows { x, idx } => {
                let xs = nodes[x.0].value.shape().to_vec();
                let dcols = xs[1];
                let d = dy.as_slice().expect("contiguous");
                let mut g = vec![0.0; xs[0] * dcols];
                for (r, &row) in idx.iter().enumerate() {
                    for j in 0..dcols {
                        g[row * dcols + j] += d[r * dcols + j];
                    }
                }
                accumulate(&mut grads, nodes, *x, from_vec(&xs, g));
            }
            Op::ScatterRows { x, idx } => {
                let xs = nodes[x.0].value.shape().to_vec();
                let dcols = xs[1];
                let d = dy.as_slice().expect("contiguous");
                let mut g = Vec::with_capacity(xs[0] * dcols);
                for &row in idx.iter() {
                    g.extend_from_slice(&d[row * dcols..(row + 1) * dcols]);
                }
                accumulate(&mut grads, nodes, *x, from_vec(&xs, g));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let d = dy.as_slice().expect("contiguous");
                let mut off = 0;
                for &x in xs {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let len = shape[*axis];
                    if nodes[x.0].needs_grad {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + off) * inner;
                            g.extend_from_slice(&d[base..base + len * inner]);
                        }
                        accumulate(&mut grads, nodes, x, from_vec(&shape, g));
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = nodes[x.0].value.shape().to_vec();
                let (outer, total, inner) = axis_split(&xs, *axis);
                let len = out.shape()[*axis];
                let d = dy.as_slice().expect("contiguous");
                let mut g = vec![0.0; outer * total * inner];
                for o in 0..outer {
                    let base = (o * total + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(&mut grads, nodes, *x, from_vec(&xs, g));
            }
        }
        // Interior node gradients are not retained.
        if !matches!(node.op, Op::Leaf) {
            grads[i] = None;
        }
    }
    Grads { grads }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    nodes: &[Node],
    grads: &mut [Option<ArrayD<f64>>],
    a: Var,
    b: Var,
    trans_a: bool,
    trans_b: bool,
    dy: &ArrayD<f64>,
) {
    let sa = nodes[a.0].value.shape().to_vec();
    let sb = nodes[b.0].value.shape().to_vec();
    let rank = sa.len();
    let batch = if rank == 3 { sa[0] } else { 1 };
    let (ar, ac) = (sa[rank - 2], sa[rank - 1]);
    let (br, bc) = (sb[rank - 2], sb[rank - 1]);
    let av = nodes[a.0].value.as_slice().expect("contiguous");
    let bv = nodes[b.0].value.as_slice().expect("contiguous");
    let d = dy.as_slice().expect("contiguous");
    let m = if trans_a { ac } else { ar };
    let n = if trans_b { br } else { bc };
    let (sza, szb, szd) = (ar * ac, br * bc, m * n);

    if nodes[a.0].needs_grad {
        let mut g = vec![0.0; batch * sza];
        for i in 0..batch {
            let ga = &mut g[i * sza..(i + 1) * sza];
            let di = &d[i * szd..(i + 1) * szd];
            let bi = &bv[i * szb..(i + 1) * szb];
            if !trans_a {
                // dA = dC * op(B)^T
                kernels::gemm(di, m, n, false, bi, br, bc, !trans_b, ga, 0.0);
            } else {
                // dA = op(B) * dC^T
                kernels::gemm(bi, br, bc, trans_b, di, m, n, true, ga, 0.0);
            }
        }
        accumulate(grads, nodes, a, from_vec(&sa, g));
    }
    if nodes[b.0].needs_grad {
        let mut g = vec![0.0; batch * szb];
        for i in 0..batch {
            let gb = &mut g[i * szb..(i + 1) * szb];
            let di = &d[i * szd..(i + 1) * szd];
            let ai = &av[i * sza..(i + 1) * sza];
            if !trans_b {
                // dB = op(A)^T * dC
                kernels::gemm(ai, ar, ac, !trans_a, di, m, n, false, gb, 0.0);
            } else {
                // dB = dC^T * op(A)
                kernels::gemm(di, m, n, true, ai, ar, ac, trans_a, gb, 0.0);
            }
        }
        accumulate(grads, nodes, b, from_vec(&sb, g));
    }
}
