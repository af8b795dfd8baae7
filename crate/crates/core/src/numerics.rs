//! Max-shifted log-sum-exp and softmax.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `ln Σ exp(v_i)`, evaluated as `m + ln Σ exp(v_i - m)` with `m = max v`.
pub fn logsumexp<T: Scalar>(v: &[T]) -> Result<T> {
    if v.is_empty() {
        return Err(Error::Usage("logsumexp of an empty vector".into()));
    }
    Ok(lse_unchecked(v))
}

pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Usage("softmax of an empty vector".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn lse_unchecked<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_unchecked<T: Scalar>(v: &[T]) -> Vec<T> {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_zeros() {
        let v = [0.0_f64, 0.0];
        assert!((logsumexp(&v).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softmax(&v).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn large_values_do_not_overflow() {
        let v = [1000.0_f64, 1000.0];
        let lse = logsumexp(&v).unwrap();
        assert!((lse - (1000.0 + 2f64.ln())).abs() < 1e-12);
        let p = softmax(&v).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_is_usage_error() {
        let v: [f64; 0] = [];
        assert!(matches!(logsumexp(&v), Err(Error::Usage(_))));
        assert!(matches!(softmax(&v), Err(Error::Usage(_))));
    }

    #[test]
    fn works_in_single_precision() {
        let p = softmax(&[1.0_f32, 2.0, 3.0]).unwrap();
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn agrees_with_naive_evaluation(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
            prop_assert!((logsumexp(&v).unwrap() - naive).abs() < 1e-10);
        }

        #[test]
        fn softmax_is_a_shift_invariant_distribution(
            v in prop::collection::vec(-50.0f64..50.0, 1..12),
            k in -100.0f64..100.0,
        ) {
            let p = softmax(&v).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
            let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_entries_strictly_inside_unit_interval_for_moderate_inputs() {
        let p = softmax(&[-3.0_f64, 0.5, 2.0, 7.0]).unwrap();
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }
}
