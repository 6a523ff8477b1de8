use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_finite, Coefficient, StatsError};

/// Ordinary least squares fit with an intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// Intercept (`const`) first, then one entry per covariate.
    pub coefficients: Vec<Coefficient>,
    pub n: usize,
    pub dof: usize,
    /// Residual variance estimate.
    pub sigma2: f64,
    pub r_squared: f64,
}

impl OlsFit {
    pub fn get(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Columns whose triangular factor falls below this fraction of their norm are
/// treated as linear combinations of earlier columns.
const RANK_TOL: f64 = 1e-10;

/// Fit `y = const + x β` by Householder QR. Intervals and p-values use the t
/// distribution with `n - p - 1` degrees of freedom.
pub fn ols_fit(y: &[f64], x: &Array2<f64>, names: &[&str]) -> Result<OlsFit, StatsError> {
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(StatsError::LengthMismatch { a: y.len(), b: n });
    }
    if names.len() != p {
        return Err(StatsError::LengthMismatch { a: names.len(), b: p });
    }
    if n <= p + 1 {
        return Err(StatsError::TooFew { need: p + 2, got: n });
    }
    check_finite(y, "response")?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite("design"));
    }
    let k = p + 1;
    let design = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
    let qr = design.clone().qr();
    let r = qr.r();
    for j in 0..k {
        let norm = design.column(j).norm();
        if norm == 0.0 || r[(j, j)].abs() <= RANK_TOL * norm {
            let column = if j == 0 { "const" } else { names[j - 1] };
            return Err(StatsError::RankDeficient { column: column.to_string() });
        }
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r.solve_upper_triangular(&qty).expect("full rank");
    let resid = &yv - &design * &beta;
    let dof = n - k;
    let rss = resid.norm_squared();
    let sigma2 = rss / dof as f64;
    let ybar = yv.mean();
    let tss: f64 = yv.iter().map(|v| (v - ybar).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let r_inv = r.solve_upper_triangular(&DMatrix::identity(k, k)).expect("full rank");
    let cov_unscaled = &r_inv * r_inv.transpose();
    let coefficients = (0..k)
        .map(|j| {
            let name = if j == 0 { "const" } else { names[j - 1] };
            let se = (sigma2 * cov_unscaled[(j, j)]).sqrt();
            Coefficient::new(name, beta[j], se, Some(dof as f64))
        })
        .collect();
    Ok(OlsFit { coefficients, n, dof, sigma2, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NAMES: [&str; 4] = ["disease", "age", "sex", "bmi"];

    fn covariates(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, 4), |(_, j)| match j {
            0 | 2 => rng.random_range(0..2) as f64,
            1 => rng.random_range(40.0..80.0),
            _ => rng.random_range(18.0..35.0),
        })
    }

    #[test]
    fn exact_linear_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = covariates(30, &mut rng);
        let y: Vec<f64> = (0..30).map(|i| 2.0 + 3.0 * x[[i, 0]]).collect();
        let f = ols_fit(&y, &x, &NAMES).unwrap();
        assert!((f.get("disease").unwrap().beta - 3.0).abs() < 1e-10);
        assert!((f.get("const").unwrap().beta - 2.0).abs() < 1e-9);
        for n in ["age", "sex", "bmi"] {
            assert!(f.get(n).unwrap().beta.abs() < 1e-11);
        }
        assert!(f.sigma2 < 1e-20);
        assert_eq!(f.dof, 25);
    }

    #[test]
    fn constant_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = covariates(20, &mut rng);
        let f = ols_fit(&[4.5; 20], &x, &NAMES).unwrap();
        assert!((f.get("const").unwrap().beta - 4.5).abs() < 1e-10);
        for n in NAMES {
            assert!(f.get(n).unwrap().beta.abs() < 1e-11);
        }
    }

    #[test]
    fn rank_deficiency_names_the_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = covariates(20, &mut rng);
        for i in 0..20 {
            x[[i, 3]] = 2.0 * x[[i, 1]] - 1.0;
        }
        match ols_fit(&[1.0; 20], &x, &NAMES) {
            Err(StatsError::RankDeficient { column }) => assert_eq!(column, "bmi"),
            other => panic!("{other:?}"),
        }
        let mut x = covariates(20, &mut rng);
        x.column_mut(2).fill(0.0);
        match ols_fit(&[1.0; 20], &x, &NAMES) {
            Err(StatsError::RankDeficient { column }) => assert_eq!(column, "sex"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ols_fit(&[1.0; 5], &covariates(5, &mut rng), &NAMES), Err(StatsError::TooFew { .. })));
    }

    #[test]
    fn textbook_simple_regression() {
        // y = 1, 3, 2, 5, 4 on x = 1..5: slope 0.8, intercept 0.6, s^2 = 3.6 / 3 / 10 for the slope
        let x = Array2::from_shape_vec((5, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let f = ols_fit(&[1.0, 3.0, 2.0, 5.0, 4.0], &x, &["x"]).unwrap();
        let s = f.get("x").unwrap();
        assert!((s.beta - 0.8).abs() < 1e-12);
        assert!((f.get("const").unwrap().beta - 0.6).abs() < 1e-12);
        assert!((s.se - (1.2f64 / 10.0).sqrt()).abs() < 1e-12);
        // t = 0.8 / sqrt(0.12) = 2.3094 on 3 dof
        assert!((s.p_value - 0.10408).abs() < 1e-4, "{}", s.p_value);
    }

    proptest! {
        #[test]
        fn matches_normal_equation_oracle(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(8..20);
            let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f = ols_fit(&y, &x, &["a", "b", "c"]).unwrap();
            // independent oracle: solve (X'X) b = X'y by Gauss-Jordan elimination
            let k = 4;
            let row = |i: usize, j: usize| if j == 0 { 1.0 } else { x[[i, j - 1]] };
            let mut a = vec![vec![0.0; k + 1]; k];
            for r in 0..k {
                for c in 0..k {
                    a[r][c] = (0..n).map(|i| row(i, r) * row(i, c)).sum();
                }
                a[r][k] = (0..n).map(|i| row(i, r) * y[i]).sum();
            }
            for c in 0..k {
                let piv = (c..k).max_by(|&p, &q| a[p][c].abs().total_cmp(&a[q][c].abs())).unwrap();
                a.swap(c, piv);
                for r in 0..k {
                    if r != c {
                        let m = a[r][c] / a[c][c];
                        for cc in c..=k {
                            a[r][cc] -= m * a[c][cc];
                        }
                    }
                }
            }
            for j in 0..k {
                let b = a[j][k] / a[j][j];
                prop_assert!((f.coefficients[j].beta - b).abs() < 1e-8, "{} vs {}", f.coefficients[j].beta, b);
            }
        }
    }
}
