//! TWO-NN: a single intrinsic dimension from neighbour distance ratios.
//!
//! Under local homogeneity `mu_i ~ Pareto(1, d)`, so `log mu_i ~ Exp(d)` and
//! `S = sum log mu_i ~ Gamma(n, rate d)`. The shape MLE is `n / S`, and since
//! `d * S ~ Gamma(n, 1)` is a pivot the confidence interval is exact:
//! `[G^-1((1-level)/2) / S, G^-1((1+level)/2) / S]` with `G` the `Gamma(n, 1)` CDF.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};
use thiserror::Error;

use crate::geometry::RatioVector;

pub const DEFAULT_CI_LEVEL: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwoNnError {
    #[error("need at least 2 ratios, got {0}")]
    EmptyInput(usize),
    #[error("ratio {value} at index {index} is outside the Pareto support (1, inf)")]
    NonParetoSupport { index: usize, value: f64 },
    #[error("confidence level {0} must lie in [0.5, 1)")]
    InvalidCiLevel(f64),
    #[error("discard fraction {0} must lie in [0, 1)")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdEstimate {
    pub d_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub n_used: usize,
}

impl IdEstimate {
    /// Estimates above the nominal dimension are reported as-is; this flags them.
    pub fn exceeds_nominal(&self, nominal_dim: usize) -> bool {
        self.d_hat > nominal_dim as f64
    }
}

fn check_ratios(ratios: &RatioVector) -> Result<(), TwoNnError> {
    if ratios.len() < 2 {
        return Err(TwoNnError::EmptyInput(ratios.len()));
    }
    for (index, &value) in ratios.values().iter().enumerate() {
        if !(value > 1.0 && value.is_finite()) {
            return Err(TwoNnError::NonParetoSupport { index, value });
        }
    }
    Ok(())
}

/// Pareto shape MLE with an exact Gamma-pivot confidence interval.
///
/// `ci_level` is restricted to `[0.5, 1)`, which keeps `ci_low <= d_hat <= ci_high`
/// for every `n >= 2`.
pub fn twonn_mle(ratios: &RatioVector, ci_level: f64) -> Result<IdEstimate, TwoNnError> {
    if !(0.5..1.0).contains(&ci_level) {
        return Err(TwoNnError::InvalidCiLevel(ci_level));
    }
    check_ratios(ratios)?;
    let n = ratios.len();
    let s: f64 = ratios.values().iter().map(|m| m.ln()).sum();
    let pivot = Gamma::new(n as f64, 1.0).expect("positive shape");
    let tail = (1.0 - ci_level) / 2.0;
    Ok(IdEstimate {
        d_hat: n as f64 / s,
        ci_low: pivot.inverse_cdf(tail) / s,
        ci_high: pivot.inverse_cdf(1.0 - tail) / s,
        ci_level,
        n_used: n,
    })
}

/// Drops the `floor(fraction * n)` largest ratios, keeping survivors in order.
///
/// Among equal values the later one is dropped first.
pub fn twonn_discard_fraction(
    ratios: &RatioVector,
    fraction: f64,
) -> Result<RatioVector, TwoNnError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(TwoNnError::InvalidFraction(fraction));
    }
    let n = ratios.len();
    // The tolerance absorbs products like 0.29 * 100 = 28.999999999999996.
    let drop = ((fraction * n as f64) + 1e-9).floor() as usize;
    if drop == 0 {
        return Ok(ratios.clone());
    }
    let v = ratios.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(b.cmp(&a)));
    let mut keep = vec![true; n];
    for &i in &order[..drop] {
        keep[i] = false;
    }
    Ok(v.iter()
        .zip(keep)
        .filter_map(|(&x, k)| k.then_some(x))
        .collect::<Vec<_>>()
        .into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mu_ratios, nearest_neighbors, DataMatrix};
    use crate::rng;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    /// Pareto(1, d) by inversion: `U^(-1/d)`.
    fn pareto(n: usize, d: f64, seed: u64) -> RatioVector {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| (1.0 - r.random::<f64>()).powf(-1.0 / d))
            .collect::<Vec<_>>()
            .into()
    }

    #[test]
    fn analytic_cases() {
        let e = std::f64::consts::E;
        let est = twonn_mle(&vec![e; 4].into(), 0.95).unwrap();
        assert!((est.d_hat - 1.0).abs() < 1e-15);
        for n in [2, 7, 100] {
            let est = twonn_mle(&vec![0.5f64.exp(); n].into(), 0.95).unwrap();
            assert!((est.d_hat - 2.0).abs() < 1e-12, "{n}: {}", est.d_hat);
        }
    }

    #[test]
    fn interval_brackets_estimate() {
        for n in [2, 3, 10, 1000] {
            let est = twonn_mle(&pareto(n, 3.0, n as u64), 0.5).unwrap();
            assert!(0.0 < est.ci_low && est.ci_low <= est.d_hat && est.d_hat <= est.ci_high);
        }
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            twonn_mle(&vec![2.0].into(), 0.95),
            Err(TwoNnError::EmptyInput(1))
        );
        assert_eq!(
            twonn_mle(&vec![2.0, 1.0].into(), 0.95),
            Err(TwoNnError::NonParetoSupport {
                index: 1,
                value: 1.0
            })
        );
        assert_eq!(
            twonn_mle(&vec![2.0, 3.0].into(), 0.2),
            Err(TwoNnError::InvalidCiLevel(0.2))
        );
    }

    #[test]
    fn pareto_consistency() {
        let est = twonn_mle(&pareto(100_000, 7.0, 99), DEFAULT_CI_LEVEL).unwrap();
        assert!((est.d_hat - 7.0).abs() / 7.0 < 0.02, "{}", est.d_hat);
        assert!(est.ci_low < 7.0 && 7.0 < est.ci_high);
    }

    #[test]
    fn interval_coverage() {
        let covered = (0..1000)
            .filter(|&rep| {
                let est = twonn_mle(&pareto(200, 3.0, 10_000 + rep), 0.95).unwrap();
                est.ci_low <= 3.0 && 3.0 <= est.ci_high
            })
            .count();
        let rate = covered as f64 / 1000.0;
        assert!((rate - 0.95).abs() <= 0.02, "coverage {rate}");
    }

    #[test]
    fn discard_examples() {
        let v: RatioVector = vec![1.1, 1.5, 9.0].into();
        assert_eq!(twonn_discard_fraction(&v, 0.0).unwrap(), v);
        assert_eq!(
            twonn_discard_fraction(&v, 0.34).unwrap().values(),
            &[1.1, 1.5]
        );
        assert!(twonn_discard_fraction(&v, 1.0).is_err());
    }

    #[test]
    fn discard_matches_sort_oracle() {
        let v = pareto(1000, 2.0, 5);
        let kept = twonn_discard_fraction(&v, 0.1).unwrap();
        assert_eq!(kept.len(), 900);
        let mut a = kept.into_inner();
        let mut b = v.values().to_vec();
        b.sort_by(f64::total_cmp);
        b.truncate(900);
        a.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn low_dimensional_hypercubes() {
        for d in [1usize, 2] {
            let mut r = rng::seeded(d as u64);
            let x = Array2::from_shape_fn((4000, d), |_| r.random::<f64>());
            let data = DataMatrix::from_array(x).unwrap();
            let mu = mu_ratios(&nearest_neighbors(&data, 2).unwrap()).unwrap();
            let est = twonn_mle(&mu, 0.95).unwrap();
            assert!(
                (est.d_hat - d as f64).abs() / (d as f64) < 0.1,
                "{d}: {}",
                est.d_hat
            );
        }
    }

    proptest! {
        #[test]
        fn larger_ratios_give_smaller_estimates(
            base in proptest::collection::vec(1.0001f64..50.0, 2..60),
            bump in 1.0001f64..3.0,
        ) {
            let a = twonn_mle(&base.clone().into(), 0.95).unwrap();
            let bigger: Vec<f64> = base.iter().map(|m| m * bump).collect();
            let b = twonn_mle(&bigger.into(), 0.95).unwrap();
            prop_assert!(b.d_hat < a.d_hat);
        }

        #[test]
        fn discard_keeps_order_and_count(
            v in proptest::collection::vec(1.0001f64..50.0, 1..80),
            f in 0.0f64..0.99,
        ) {
            let kept = twonn_discard_fraction(&v.clone().into(), f).unwrap();
            let expected = v.len() - ((f * v.len() as f64) + 1e-9).floor() as usize;
            prop_assert_eq!(kept.len(), expected);
            // Survivors form a subsequence of the input.
            let mut it = v.iter();
            for x in kept.values() {
                prop_assert!(it.any(|y| y == x));
            }
        }
    }
}
