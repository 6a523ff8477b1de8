use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_finite, Coefficient, StatsError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxOptions {
    pub max_iter: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub tol: f64,
    /// A coefficient beyond this many standard deviations of its covariate
    /// (on the log-hazard scale) signals a monotone likelihood.
    pub divergence: f64,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8, divergence: 10.0 }
    }
}

/// Cox proportional hazards fit; intervals and p-values are Wald statistics
/// from the observed information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub coefficients: Vec<Coefficient>,
    pub hazard_ratios: Vec<f64>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    /// Log partial likelihood after each accepted Newton step, starting at β = 0.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub n: usize,
    pub events: usize,
}

impl CoxFit {
    pub fn get(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

struct Prepared {
    /// Centred covariates, rows sorted by decreasing time.
    x: DMatrix<f64>,
    time: Vec<f64>,
    event: Vec<bool>,
}

struct Eval {
    ll: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

/// Log partial likelihood with Breslow ties, its gradient and the observed information.
fn evaluate(d: &Prepared, beta: &DVector<f64>) -> Eval {
    let (n, p) = d.x.shape();
    let eta = &d.x * beta;
    let c = eta.max();
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut i = 0;
    while i < n {
        // add every subject tied at this time to the risk set before scoring its events
        let t = d.time[i];
        let mut j = i;
        let mut deaths = 0.0;
        let mut x_events = DVector::zeros(p);
        let mut eta_events = 0.0;
        while j < n && d.time[j] == t {
            let xi = d.x.row(j).transpose();
            let w = (eta[j] - c).exp();
            s0 += w;
            s1.axpy(w, &xi, 1.0);
            s2.ger(w, &xi, &xi, 1.0);
            if d.event[j] {
                deaths += 1.0;
                x_events += &xi;
                eta_events += eta[j];
            }
            j += 1;
        }
        if deaths > 0.0 {
            let mean = &s1 / s0;
            ll += eta_events - deaths * (s0.ln() + c);
            grad += &x_events - &mean * deaths;
            info += (&s2 / s0 - &mean * mean.transpose()) * deaths;
        }
        i = j;
    }
    Eval { ll, grad, info }
}

fn prepare(time: &[f64], event: &[bool], x: &Array2<f64>, names: &[&str]) -> Result<(Prepared, Vec<f64>), StatsError> {
    let (n, p) = x.dim();
    if time.len() != n || event.len() != n {
        return Err(StatsError::LengthMismatch { a: time.len().min(event.len()), b: n });
    }
    if names.len() != p {
        return Err(StatsError::LengthMismatch { a: names.len(), b: p });
    }
    check_finite(time, "time")?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite("covariates"));
    }
    if time.iter().any(|&t| t < 0.0) {
        return Err(StatsError::InvalidRecord { id: "<survival>".into(), what: "negative time".into() });
    }
    if !event.iter().any(|&e| e) {
        return Err(StatsError::NoEvents);
    }
    let mut sd = Vec::with_capacity(p);
    let mut centred = x.clone();
    for (j, mut col) in centred.columns_mut().into_iter().enumerate() {
        let m = col.mean().unwrap_or(0.0);
        col.mapv_inplace(|v| v - m);
        let s = (col.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if s <= 1e-12 * m.abs().max(1.0) {
            return Err(StatsError::ConstantCovariate(names[j].to_string()));
        }
        sd.push(s);
    }
    let design = DMatrix::from_fn(n, p, |i, j| centred[[i, j]]);
    let r = design.clone().qr().r();
    for j in 0..p {
        if r[(j, j)].abs() <= 1e-10 * design.column(j).norm() {
            return Err(StatsError::RankDeficient { column: names[j].to_string() });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let prepared = Prepared {
        x: DMatrix::from_fn(n, p, |i, j| centred[[order[i], j]]),
        time: order.iter().map(|&i| time[i]).collect(),
        event: order.iter().map(|&i| event[i]).collect(),
    };
    Ok((prepared, sd))
}

/// Log partial likelihood (Breslow ties) of `beta`; covariates are used as given.
pub fn cox_log_likelihood(time: &[f64], event: &[bool], x: &Array2<f64>, beta: &[f64]) -> f64 {
    let (n, p) = x.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let d = Prepared {
        x: DMatrix::from_fn(n, p, |i, j| x[[order[i], j]]),
        time: order.iter().map(|&i| time[i]).collect(),
        event: order.iter().map(|&i| event[i]).collect(),
    };
    evaluate(&d, &DVector::from_column_slice(beta)).ll
}

/// Newton-Raphson on the log partial likelihood with step halving.
pub fn cox_fit(
    time: &[f64],
    event: &[bool],
    x: &Array2<f64>,
    names: &[&str],
    opts: CoxOptions,
) -> Result<CoxFit, StatsError> {
    let (d, sd) = prepare(time, event, x, names)?;
    let p = names.len();
    let mut beta = DVector::zeros(p);
    let mut cur = evaluate(&d, &beta);
    let null_ll = cur.ll;
    let mut trace = vec![cur.ll];
    let diverged = |beta: &DVector<f64>| (0..p).find(|&j| beta[j].abs() * sd[j] > opts.divergence);
    let mut iterations = 0;
    loop {
        if cur.grad.amax() < opts.tol {
            break;
        }
        if iterations == opts.max_iter {
            return Err(StatsError::NonConvergence { iterations, grad_norm: cur.grad.amax() });
        }
        iterations += 1;
        let step = match cur.info.clone().cholesky() {
            Some(ch) => ch.solve(&cur.grad),
            None => {
                let j = (0..p).max_by(|&a, &b| (beta[a].abs() * sd[a]).total_cmp(&(beta[b].abs() * sd[b]))).unwrap_or(0);
                return Err(StatsError::MonotoneLikelihood { covariate: names[j].to_string() });
            }
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let e = evaluate(&d, &cand);
            if e.ll.is_finite() && e.ll >= cur.ll {
                accepted = Some((cand, e));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((b, e)) => {
                let moved = (&b - &beta).amax();
                beta = b;
                cur = e;
                trace.push(cur.ll);
                if let Some(j) = diverged(&beta) {
                    return Err(StatsError::MonotoneLikelihood { covariate: names[j].to_string() });
                }
                // the likelihood is flat to machine precision along the Newton direction
                if moved <= 1e-12 * beta.amax().max(1.0) {
                    break;
                }
            }
            None => break,
        }
    }
    if cur.grad.amax() >= opts.tol.max(1e-6) {
        return Err(StatsError::NonConvergence { iterations, grad_norm: cur.grad.amax() });
    }
    let cov = cur
        .info
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| StatsError::MonotoneLikelihood { covariate: names[0].to_string() })?;
    let coefficients: Vec<Coefficient> =
        (0..p).map(|j| Coefficient::new(names[j], beta[j], cov[(j, j)].max(0.0).sqrt(), None)).collect();
    Ok(CoxFit {
        hazard_ratios: coefficients.iter().map(|c| c.beta.exp()).collect(),
        coefficients,
        log_likelihood: cur.ll,
        null_log_likelihood: null_ll,
        trace,
        iterations,
        n: time.len(),
        events: event.iter().filter(|&&e| e).count(),
    })
}
