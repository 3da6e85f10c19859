use crate::math::{exp, ln, powf};

const ITERATIONS: usize = 200;

/// Empirical ψ_α norm: the smallest `λ` with `mean(exp((|X|/λ)^α) − 1) ≤ 1`.
///
/// The search runs on `|X| / max|X|`, so `estimate(cX) = c·estimate(X)` holds
/// exactly whenever `c` is a power of two and to rounding otherwise.
pub fn orlicz_norm_estimate(samples: &[f64], alpha: f64) -> f64 {
    assert!(alpha > 0.0, "alpha must be positive");
    assert!(!samples.is_empty(), "no samples");
    let top = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return 0.0;
    }
    if !top.is_finite() {
        return f64::INFINITY;
    }
    let n = samples.len() as f64;
    let crit = |lam: f64| {
        samples
            .iter()
            .map(|v| exp(powf(v.abs() / top / lam, alpha)) - 1.0)
            .sum::<f64>()
            / n
    };
    // At `hi` every term is ≤ 1; at `lo` the largest alone contributes n/n.
    let mut lo = powf(ln(n + 1.0), -1.0 / alpha);
    let mut hi = powf(ln(2.0), -1.0 / alpha);
    for _ in 0..ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if crit(mid) <= 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    top * hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn constant_samples() {
        let v = orlicz_norm_estimate(&[1.0; 10], 1.0);
        assert!((v - 1.0 / core::f64::consts::LN_2).abs() < 1e-9);
        let v = orlicz_norm_estimate(&[-3.0, 3.0], 2.0);
        assert!((v - 3.0 / libm::sqrt(core::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn zeros() {
        assert_eq!(orlicz_norm_estimate(&[0.0, -0.0], 1.0), 0.0);
    }

    #[test]
    fn criterion_met_at_estimate() {
        let s = vec![0.1, 2.0, 0.7, 1.3, 0.0];
        let lam = orlicz_norm_estimate(&s, 1.0);
        let c = |l: f64| s.iter().map(|v| exp(v / l) - 1.0).sum::<f64>() / s.len() as f64;
        assert!(c(lam) <= 1.0 + 1e-12);
        assert!(c(lam * (1.0 - 1e-9)) > 1.0);
    }

    proptest! {
        #[test]
        fn homogeneous(s in proptest::collection::vec(-50.0f64..50.0, 1..40), c in 0.01f64..100.0, a in 0.3f64..3.0) {
            let base = orlicz_norm_estimate(&s, a);
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            let e = orlicz_norm_estimate(&scaled, a);
            prop_assert!((e - c * base).abs() <= 1e-12 * (1.0 + c * base));
            let doubled: Vec<f64> = s.iter().map(|v| v * 2.0).collect();
            prop_assert_eq!(orlicz_norm_estimate(&doubled, a), 2.0 * base);
        }

        #[test]
        fn monotone(s in proptest::collection::vec(0.0f64..10.0, 1..30), i in 0usize..30, d in 0.0f64..5.0) {
            let mut t = s.clone();
            let i = i % t.len();
            t[i] += d;
            prop_assert!(orlicz_norm_estimate(&t, 1.0) >= orlicz_norm_estimate(&s, 1.0) * (1.0 - 1e-12));
        }
    }
}
