use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{check_finite, StatsError};

/// Significance tier of a p-value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Significance {
    #[serde(rename = "ns")]
    Ns,
    #[serde(rename = "*")]
    P05,
    #[serde(rename = "**")]
    P01,
    #[serde(rename = "***")]
    P001,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p < 0.001 {
            Self::P001
        } else if p < 0.01 {
            Self::P01
        } else if p < 0.05 {
            Self::P05
        } else {
            Self::Ns
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Self::Ns => "ns",
            Self::P05 => "*",
            Self::P01 => "**",
            Self::P001 => "***",
        }
    }
}

impl fmt::Display for Significance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Two-sided Welch t-test; returns `(t, p)`. When both samples have zero
/// variance the test degenerates: equal means give `(0, 1)`, different means `(±inf, 0)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: a.len().min(b.len()) });
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    // relative to the scale of the data so that rounding noise counts as zero variance
    let scale = ma.abs().max(mb.abs()).max(f64::MIN_POSITIVE);
    if se2.sqrt() <= 1e-13 * scale {
        return Ok(if (ma - mb).abs() <= 1e-13 * scale { (0.0, 1.0) } else { ((ma - mb).signum() * f64::INFINITY, 0.0) });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive dof");
    Ok((t, (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)))
}

/// Bootstrap distribution of one arm's mean metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub replicates: Vec<f64>,
}

/// Paired bootstrap comparison of two arms evaluated on the same subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub replicates: Vec<f64>,
    pub comparator_mean: f64,
    pub comparator_std: f64,
    pub comparator_replicates: Vec<f64>,
    pub t_statistic: f64,
    pub p_value: f64,
    pub significance: Significance,
}

/// Subject indices of replicate `r`, drawn from its own stream.
fn resample_indices(n: usize, seed: u64, r: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn replicate_means(values: &[f64], n_boot: usize, seed: u64) -> Vec<f64> {
    (0..n_boot)
        .map(|r| {
            let idx = resample_indices(values.len(), seed, r);
            idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
        })
        .collect()
}

pub fn bootstrap_summary(metric: &str, values: &[f64], n_boot: usize, seed: u64) -> Result<BootstrapSummary, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: values.len() });
    }
    if n_boot < 2 {
        return Err(StatsError::TooFew { need: 2, got: n_boot });
    }
    check_finite(values, "bootstrap metric")?;
    let replicates = replicate_means(values, n_boot, seed);
    let (mean, std) = mean_std(&replicates);
    Ok(BootstrapSummary { metric: metric.to_string(), mean, std, replicates })
}

/// Resample subjects with replacement `n_boot` times, using the same indices
/// for both arms, and t-test the two sets of replicate means.
pub fn bootstrap_compare(
    metric: &str,
    a: &[f64],
    b: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let sa = bootstrap_summary(metric, a, n_boot, seed)?;
    let sb = bootstrap_summary(metric, b, n_boot, seed)?;
    let (t, p) = welch_t_test(&sa.replicates, &sb.replicates)?;
    Ok(BootstrapResult {
        metric: metric.to_string(),
        mean: sa.mean,
        std: sa.std,
        replicates: sa.replicates,
        comparator_mean: sb.mean,
        comparator_std: sb.std,
        comparator_replicates: sb.replicates,
        t_statistic: t,
        p_value: p,
        significance: Significance::from_p(p),
    })
}
