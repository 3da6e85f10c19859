//! Small numeric helpers on top of `libm`.

use alloc::vec::Vec;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// Softmax of the minimal chart: the first logit is pinned to zero and
/// `free` holds the remaining `n - 1` logits. Writes `n` probabilities.
pub fn softmax_chart(free: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), free.len() + 1);
    let mut max = 0.0f64;
    for &z in free {
        if z > max {
            max = z;
        }
    }
    out[0] = exp(-max);
    let mut total = out[0];
    for (o, &z) in out[1..].iter_mut().zip(free) {
        *o = exp(z - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Inverse of [`softmax_chart`] for a strictly positive probability vector.
pub fn chart_logits(p: &[f64]) -> Vec<f64> {
    let base = ln(p[0]);
    p[1..].iter().map(|&x| ln(x) - base).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + ln(xs.iter().map(|&x| exp(x - max)).sum::<f64>())
}

/// `p ln(p/q)` with the usual conventions for zeros.
#[inline]
pub fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if q <= 0.0 {
        f64::INFINITY
    } else {
        p * ln(p / q)
    }
}

/// KL(p || q) for discrete laws; `+inf` when `q` misses mass of `p`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| xlogy_ratio(a, b)).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    sqrt(v.iter().map(|x| x * x).sum())
}

pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Ordinary least squares slope and intercept of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Median of a slice; sorts a copy with a total order.
pub fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolated quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q * (n - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_round_trip() {
        let z = [0.3, -1.2, 2.0];
        let mut p = [0.0; 4];
        softmax_chart(&z, &mut p);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let back = chart_logits(&p);
        for (a, b) in z.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_conventions() {
        assert_eq!(kl(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(kl(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
        assert!((kl(&[0.5, 0.5], &[0.25, 0.75]) - 0.143_841_036_225_890_2).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
