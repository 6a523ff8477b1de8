use serde::{Deserialize, Serialize, Serializer};

use super::{check_finite, Group, StatsError};
use crate::metrics::percentile;

/// Threshold percentiles of a disparity curve.
pub const DISPARITY_PERCENTILES: [f64; 11] = [25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0, 75.0];

/// Positive-outcome rates of both groups at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityPoint {
    pub percentile: f64,
    pub threshold: f64,
    pub white_positive: usize,
    pub white_total: usize,
    pub non_white_positive: usize,
    pub non_white_total: usize,
    /// White rate over non-white rate; `inf` when only the denominator rate is
    /// zero and `nan` when both are.
    #[serde(serialize_with = "sentinel")]
    pub ratio: f64,
}

fn sentinel<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else {
        s.serialize_str("inf")
    }
}

/// Ratio of the rates of `value > q` in the White and non-White groups, with
/// `q` the given percentile of all values.
pub fn disparity_ratio(values: &[f64], groups: &[Group], q_percentile: f64) -> Result<DisparityPoint, StatsError> {
    if values.len() != groups.len() {
        return Err(StatsError::LengthMismatch { a: values.len(), b: groups.len() });
    }
    check_finite(values, "disparity values")?;
    for g in [Group::White, Group::NonWhite] {
        if !groups.contains(&g) {
            return Err(StatsError::EmptyGroup(g));
        }
    }
    let threshold = percentile(values, q_percentile).expect("non-empty");
    let count = |g: Group| {
        let members = values.iter().zip(groups).filter(|(_, &h)| h == g);
        let total = members.clone().count();
        (members.filter(|(&v, _)| v > threshold).count(), total)
    };
    let (wp, wt) = count(Group::White);
    let (np, nt) = count(Group::NonWhite);
    let (rw, rn) = (wp as f64 / wt as f64, np as f64 / nt as f64);
    let ratio = match (wp, np) {
        (0, 0) => f64::NAN,
        (_, 0) => f64::INFINITY,
        _ => rw / rn,
    };
    Ok(DisparityPoint {
        percentile: q_percentile,
        threshold,
        white_positive: wp,
        white_total: wt,
        non_white_positive: np,
        non_white_total: nt,
        ratio,
    })
}

/// Disparity ratios at the 25th to 75th percentiles in steps of 5.
pub fn disparity_curve(values: &[f64], groups: &[Group]) -> Result<Vec<DisparityPoint>, StatsError> {
    DISPARITY_PERCENTILES.iter().map(|&q| disparity_ratio(values, groups, q)).collect()
}
