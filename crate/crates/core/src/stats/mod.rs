//! Population statistics: bootstrapped model comparison, OLS association,
//! Cox proportional hazards and demographic disparity ratios.

mod bootstrap;
mod cox;
mod disparity;
mod ols;
mod records;

pub use bootstrap::{bootstrap_compare, bootstrap_summary, welch_t_test, BootstrapResult, BootstrapSummary, Significance};
pub use cox::{cox_fit, cox_log_likelihood, CoxFit, CoxOptions};
pub use disparity::{disparity_curve, disparity_ratio, DisparityPoint, DISPARITY_PERCENTILES};
pub use ols::{ols_fit, OlsFit};
pub use records::{association_design, read_records, write_records, Group, SubjectRecord, ASSOCIATION_COVARIATES};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {need} observations, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: String },
    #[error("covariate {0} is constant")]
    ConstantCovariate(String),
    #[error("no events in the survival data")]
    NoEvents,
    #[error("Newton iterations did not converge after {iterations} steps (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("monotone partial likelihood: coefficient of {covariate} diverges")]
    MonotoneLikelihood { covariate: String },
    #[error("group {0:?} is empty")]
    EmptyGroup(Group),
    #[error("invalid record {id}: {what}")]
    InvalidRecord { id: String, what: String },
    #[error("record {id} has no metric {metric}")]
    MissingMetric { id: String, metric: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Estimate of one coefficient with its 95% interval and two-sided p-value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub beta: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

impl Coefficient {
    /// Interval and p-value from a t distribution with `dof` degrees of freedom, or
    /// the standard normal when `dof` is `None`.
    pub(crate) fn new(name: &str, beta: f64, se: f64, dof: Option<f64>) -> Self {
        let (q, p) = match dof {
            Some(df) => {
                let t = StudentsT::new(0.0, 1.0, df).expect("positive dof");
                (t.inverse_cdf(0.975), two_sided(|z| t.sf(z), beta, se))
            }
            None => {
                let n = Normal::standard();
                (n.inverse_cdf(0.975), two_sided(|z| n.sf(z), beta, se))
            }
        };
        Self { name: name.to_string(), beta, se, ci_low: beta - q * se, ci_high: beta + q * se, p_value: p }
    }
}

/// Two-sided p-value of `beta / se`; an exact estimate (se = 0) is significant unless it is 0.
fn two_sided(sf: impl Fn(f64) -> f64, beta: f64, se: f64) -> f64 {
    if se == 0.0 {
        return if beta == 0.0 { 1.0 } else { 0.0 };
    }
    let z = (beta / se).abs();
    (2.0 * sf(z)).clamp(0.0, 1.0)
}

fn check_finite(values: &[f64], what: &'static str) -> Result<(), StatsError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite(what))
    }
}
