//! Central finite-difference checks of analytic gradients.

use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::nn::ParamStore;

/// Outcome of a gradient check over every parameter tensor of a store.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-tensor relative error `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub entries_checked: usize,
    pub per_param: Vec<(String, f64)>,
}

fn loss_of<F>(store: &ParamStore, build: &F) -> f64
where
    F: for<'a> Fn(&mut Graph<'a>) -> Var,
{
    let mut g = Graph::with_params(store);
    let l = build(&mut g);
    g.scalar(l)
}

/// Compare analytic and central-difference gradients of the scalar built by
/// `build` with respect to every parameter in `store`.
///
/// At most `max_entries` entries are probed per tensor (all when `None`);
/// the sample is drawn deterministically from `seed`.
pub fn check_params<F>(
    store: &mut ParamStore,
    build: F,
    step: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> GradCheckReport
where
    F: for<'a> Fn(&mut Graph<'a>) -> Var,
{
    let analytic: Vec<(crate::nn::ParamId, ArrayD<f64>)> = {
        let mut g = Graph::with_params(store);
        let l = build(&mut g);
        let grads = g.backward(l);
        g.param_grads(&grads)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        params_checked: 0,
        entries_checked: 0,
        per_param: Vec::new(),
    };
    for id in store.ids() {
        let n = store.value(id).len();
        let zero = ArrayD::zeros(store.value(id).raw_dim());
        let grad = analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or(zero);
        let grad: Vec<f64> = grad.iter().copied().collect();
        let entries: Vec<usize> = match max_entries {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for &e in &entries {
            let orig = store.value(id).as_slice().expect("contiguous")[e];
            store.value_mut(id).as_slice_mut().expect("contiguous")[e] = orig + step;
            let up = loss_of(store, &build);
            store.value_mut(id).as_slice_mut().expect("contiguous")[e] = orig - step;
            let down = loss_of(store, &build);
            store.value_mut(id).as_slice_mut().expect("contiguous")[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad[e];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-10);
        let rel = diff2.sqrt() / denom;
        let name = store.name(id).to_string();
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name.clone();
        }
        report.params_checked += 1;
        report.entries_checked += entries.len();
        report.per_param.push((name, rel));
    }
    report
}

/// Same check for the gradient with respect to a free input tensor.
pub fn check_input<F>(input: &ArrayD<f64>, build: F, step: f64) -> f64
where
    F: for<'a> Fn(&mut Graph<'a>, Var) -> Var,
{
    let analytic: Vec<f64> = {
        let mut g = Graph::new();
        let x = g.input_with_grad(input.clone());
        let l = build(&mut g, x);
        let grads = g.backward(l);
        grads
            .get(x)
            .map(|a| a.iter().copied().collect())
            .unwrap_or_else(|| vec![0.0; input.len()])
    };
    let mut x = input.as_standard_layout().into_owned();
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    for e in 0..x.len() {
        let orig = x.as_slice().expect("contiguous")[e];
        let eval = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let l = build(&mut g, v);
            g.scalar(l)
        };
        x.as_slice_mut().expect("contiguous")[e] = orig + step;
        let up = eval(&x);
        x.as_slice_mut().expect("contiguous")[e] = orig - step;
        let down = eval(&x);
        x.as_slice_mut().expect("contiguous")[e] = orig;
        let numeric = (up - down) / (2.0 * step);
        diff2 += (analytic[e] - numeric).powi(2);
        a2 += analytic[e] * analytic[e];
        n2 += numeric * numeric;
    }
    diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-10)
}
