use std::rc::Rc;

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::autograd::{Graph, Unary, Var};

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
pub const WING_W: f64 = 10.0;
pub const WING_EPS: f64 = 2.0;

/// `[n_classes, ...]` one-hot encoding of a label map.
pub fn one_hot(labels: ArrayViewD<u8>, n_classes: usize) -> ArrayD<f64> {
    let mut shape = vec![n_classes];
    shape.extend_from_slice(labels.shape());
    let n = labels.len();
    let mut out = vec![0.0; n_classes * n];
    for (i, &l) in labels.iter().enumerate() {
        assert!((l as usize) < n_classes, "label {l} out of {n_classes} classes");
        out[l as usize * n + i] = 1.0;
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).expect("one-hot shape")
}

/// Soft Dice over `[C, N]` probabilities, averaged over classes, as `1 - mean dice`.
fn soft_dice_loss(g: &mut Graph, probs: Var, target: &ArrayD<f64>) -> Var {
    let c = target.shape()[0];
    let flat: Vec<f64> = target.iter().copied().collect();
    let n = flat.len() / c;
    let t_sum: Vec<f64> = flat.chunks(n).map(|r| r.iter().sum::<f64>() + DICE_SMOOTH).collect();
    let inter = g.mul_const(probs, Rc::new(flat));
    let inter = g.sum_axis(inter, 1);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let p_sum = g.sum_axis(probs, 1);
    let den = g.add_const(p_sum, &ArrayD::from_shape_vec(IxDyn(&[c]), t_sum).expect("class sums"));
    let ratio = g.div(num, den);
    let m = g.mean(ratio);
    let neg = g.scale(m, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Soft Dice plus cross-entropy (equal weights) of `[C, ...]` logits against
/// `[C, ...]` class probabilities (one-hot or soft), softmax over classes.
pub fn dice_ce(g: &mut Graph, logits: Var, target: &ArrayD<f64>) -> Var {
    assert_eq!(g.shape(logits), target.shape(), "dice_ce: logits and target differ in shape");
    let c = target.shape()[0];
    let n = target.len() / c;
    let x = g.reshape(logits, &[c, n]);
    let logp = g.log_softmax(x, 0);
    let probs = g.softmax(x, 0);
    let dice = soft_dice_loss(g, probs, target);
    let flat: Vec<f64> = target.iter().map(|t| -t).collect();
    let ce = g.mul_const(logp, Rc::new(flat));
    let ce = g.sum(ce);
    let ce = g.scale(ce, 1.0 / n as f64);
    g.add(dice, ce)
}

/// `(log sigmoid(x), log(1 - sigmoid(x)))` computed stably through a two-way log-softmax.
fn log_sigmoid_pair(g: &mut Graph, x: Var) -> (Var, Var) {
    let n = g.value(x).len();
    let col = g.reshape(x, &[n, 1]);
    let zero = g.input(ArrayD::zeros(IxDyn(&[n, 1])));
    let pair = g.concat(&[col, zero], 1);
    let ls = g.log_softmax(pair, 1);
    let pos = g.slice(ls, 1, 0, 1);
    let neg = g.slice(ls, 1, 1, 1);
    (g.reshape(pos, &[n]), g.reshape(neg, &[n]))
}

/// Mean binary cross-entropy of logits against soft targets in `[0, 1]`.
pub fn bce_with_logits(g: &mut Graph, logits: Var, target: &ArrayD<f64>) -> Var {
    assert_eq!(g.shape(logits), target.shape(), "bce: logits and target differ in shape");
    let n = target.len();
    let (lp, ln) = log_sigmoid_pair(g, logits);
    let a = g.mul_const(lp, Rc::new(target.iter().map(|t| -t).collect()));
    let b = g.mul_const(ln, Rc::new(target.iter().map(|t| t - 1.0).collect()));
    let s = g.add(a, b);
    let s = g.sum(s);
    g.scale(s, 1.0 / n as f64)
}

/// Dice plus cross-entropy for sigmoid heatmaps with Gaussian soft labels,
/// each channel treated as its own foreground.
pub fn heatmap_loss(g: &mut Graph, logits: Var, target: &ArrayD<f64>) -> Var {
    assert_eq!(g.shape(logits), target.shape(), "heatmap_loss: logits and target differ in shape");
    let c = target.shape()[0];
    let n = target.len() / c;
    let x = g.reshape(logits, &[c, n]);
    let probs = g.sigmoid(x);
    let dice = soft_dice_loss(g, probs, target);
    let bce = bce_with_logits(g, logits, target);
    g.add(dice, bce)
}

/// Cross-entropy with label smoothing `eps`. A single logit is a binary
/// sigmoid classifier with smoothed target `label (1 - eps) + eps / 2`;
/// `K > 1` logits use softmax with target `(1 - eps) onehot + eps / K`.
pub fn ce_label_smooth(g: &mut Graph, logits: Var, label: usize, eps: f64) -> Var {
    let k = g.value(logits).len();
    let x = g.reshape(logits, &[k]);
    if k == 1 {
        assert!(label <= 1, "binary label must be 0 or 1");
        let t = label as f64 * (1.0 - eps) + eps / 2.0;
        return bce_with_logits(g, x, &ArrayD::from_elem(IxDyn(&[1]), t));
    }
    assert!(label < k, "label {label} out of {k} classes");
    let target: Vec<f64> = (0..k).map(|i| -((if i == label { 1.0 - eps } else { 0.0 }) + eps / k as f64)).collect();
    let logp = g.log_softmax(x, 0);
    let l = g.mul_const(logp, Rc::new(target));
    g.sum(l)
}

pub fn mse(g: &mut Graph, pred: Var, target: &ArrayD<f64>) -> Var {
    assert_eq!(g.value(pred).len(), target.len(), "mse: size mismatch");
    let t = target.clone().into_shape_with_order(IxDyn(g.shape(pred))).expect("mse shape").mapv(|v| -v);
    let d = g.add_const(pred, &t);
    let sq = g.square(d);
    g.mean(sq)
}

/// Mean wing loss `w ln(1 + |x|/eps)` for `|x| < w`, `|x| - C` beyond.
pub fn wing_loss(g: &mut Graph, pred: Var, target: &ArrayD<f64>, w: f64, eps: f64) -> Var {
    assert_eq!(g.value(pred).len(), target.len(), "wing: size mismatch");
    let t = target.clone().into_shape_with_order(IxDyn(g.shape(pred))).expect("wing shape").mapv(|v| -v);
    let d = g.add_const(pred, &t);
    let l = g.unary(d, Unary::Wing { w, eps });
    g.mean(l)
}
