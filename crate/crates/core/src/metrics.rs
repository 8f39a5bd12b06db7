//! Standardized error metrics relative to the trivial train-moment predictor.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::combine::{CombinedPrediction, Rule};
use crate::error::{Error, Result};
use crate::partition::Scheme;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WallTimes {
    pub train_s: f64,
    /// Shared expert predictions plus this rule's pooling.
    pub predict_s: f64,
    /// Pooling alone.
    pub reduce_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rule: Rule,
    pub scheme: Scheme,
    pub snlp: f64,
    pub smse: f64,
    pub n_test: usize,
    pub wall_times: WallTimes,
    /// Test points where the rule produced a nonpositive precision and the
    /// prior was substituted.
    pub failures: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::input("metrics need at least one test point"));
    }
    if a != b {
        return Err(Error::input(format!("{a} predictions for {b} targets")));
    }
    Ok(())
}

/// Mean squared error normalized by that of always predicting `y_train_mean`.
pub fn smse(means: &[f64], y_test: &[f64], y_train_mean: f64, y_train_var: f64) -> Result<f64> {
    check_lengths(means.len(), y_test.len())?;
    if !(y_train_var > 0.0) {
        return Err(Error::input("training target variance must be positive"));
    }
    let mse: f64 = means.iter().zip(y_test).map(|(m, y)| (y - m) * (y - m)).sum();
    let base: f64 = y_test.iter().map(|y| (y - y_train_mean) * (y - y_train_mean)).sum();
    if !(base > 0.0) {
        return Err(Error::input("test targets all equal the training mean; SMSE undefined"));
    }
    Ok(mse / base)
}

#[inline]
fn nlp(y: f64, mean: f64, var: f64) -> f64 {
    0.5 * (2.0 * PI * var).ln() + (y - mean) * (y - mean) / (2.0 * var)
}

/// Mean negative log predictive density minus that of `N(y_train_mean, y_train_var)`.
pub fn snlp_moments(
    moments: &[(f64, f64)],
    y_test: &[f64],
    y_train_mean: f64,
    y_train_var: f64,
) -> Result<f64> {
    check_lengths(moments.len(), y_test.len())?;
    if !(y_train_var > 0.0) {
        return Err(Error::input("training target variance must be positive"));
    }
    let mut total = 0.0;
    for (i, (&(m, v), &y)) in moments.iter().zip(y_test).enumerate() {
        if !(v > 0.0) {
            return Err(Error::input(format!("prediction {i} has nonpositive variance {v}")));
        }
        total += nlp(y, m, v) - nlp(y, y_train_mean, y_train_var);
    }
    Ok(total / moments.len() as f64)
}

pub fn snlp(
    preds: &[CombinedPrediction],
    y_test: &[f64],
    y_train_mean: f64,
    y_train_var: f64,
) -> Result<f64> {
    let moments: Vec<(f64, f64)> = preds.iter().map(|p| (p.mean, p.variance)).collect();
    snlp_moments(&moments, y_test, y_train_mean, y_train_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cp(mean: f64, variance: f64) -> CombinedPrediction {
        CombinedPrediction { mean, variance, rule: Rule::Gpoe, weights: None }
    }

    #[test]
    fn smse_cases() {
        let y = [1.0, -2.0, 0.5];
        assert_eq!(smse(&y, &y, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(smse(&[0.3; 3], &y, 0.3, 1.0).unwrap(), 1.0);
        // ((0.5)² + (1)² + (0.5)²) / ((1−0.2)² + (−2.2)² + (0.3)²)
        let got = smse(&[0.5, -1.0, 1.0], &y, 0.2, 1.0).unwrap();
        assert_relative_eq!(got, 1.5 / (0.64 + 4.84 + 0.09), epsilon = 1e-15);
        assert!(smse(&[], &[], 0.0, 1.0).is_err());
        assert!(smse(&[1.0], &[1.0, 2.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn snlp_cases() {
        let y = [0.4, -1.2, 2.0];
        let base: Vec<_> = y.iter().map(|_| cp(0.1, 1.7)).collect();
        assert_eq!(snlp(&base, &y, 0.1, 1.7).unwrap(), 0.0);

        let perfect: Vec<_> = y.iter().map(|&v| cp(v, 1.7)).collect();
        let expected = -y.iter().map(|v| (v - 0.1) * (v - 0.1)).sum::<f64>() / 3.0 / (2.0 * 1.7);
        assert_relative_eq!(snlp(&perfect, &y, 0.1, 1.7).unwrap(), expected, epsilon = 1e-14);

        // two points by hand
        let preds = [cp(0.0, 0.5), cp(1.0, 2.0)];
        let y = [1.0, 0.0];
        let term = |y: f64, m: f64, v: f64| 0.5 * (2.0 * PI * v).ln() + (y - m).powi(2) / (2.0 * v);
        let expected = ((term(1.0, 0.0, 0.5) - term(1.0, 0.0, 1.0)) + (term(0.0, 1.0, 2.0) - term(0.0, 0.0, 1.0))) / 2.0;
        assert_relative_eq!(snlp(&preds, &y, 0.0, 1.0).unwrap(), expected, epsilon = 1e-14);

        assert!(snlp(&[cp(0.0, 0.0)], &[1.0], 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn affine_invariance(
            pts in prop::collection::vec((-3.0..3.0f64, 0.1..2.0f64, -3.0..3.0f64), 2..20),
            scale in 0.1..10.0f64,
            shift in -5.0..5.0f64,
        ) {
            let means: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let vars: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let (ym, yv) = (0.3, 1.4);
            let tr = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();

            let a = smse(&means, &y, ym, yv).unwrap();
            let b = smse(&tr(&means), &tr(&y), scale * ym + shift, yv * scale * scale).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));

            let mom: Vec<_> = means.iter().zip(&vars).map(|(&m, &v)| (m, v)).collect();
            let mom_s: Vec<_> = mom.iter().map(|&(m, v)| (scale * m + shift, v * scale * scale)).collect();
            let a = snlp_moments(&mom, &y, ym, yv).unwrap();
            let b = snlp_moments(&mom_s, &tr(&y), scale * ym + shift, yv * scale * scale).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
