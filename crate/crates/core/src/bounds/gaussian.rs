use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::{exp, powf, sqrt};
use crate::rng::uniform;

/// Squared distance-to-annulus term, halved, with the constant middle case.
pub fn gaussian_alpha(norm_x: f64, m: f64, big_m: f64) -> f64 {
    let d = if norm_x >= big_m {
        norm_x - big_m
    } else if norm_x <= m {
        m - norm_x
    } else {
        big_m - m
    };
    0.5 * d * d
}

/// Density envelope `(c̲·exp(−λ_high‖x‖²), c̄·exp(−λ_low α(x)))` valid for every
/// Gaussian density with mean norm in `[m, M]` and precision eigenvalues in
/// `[λ_low, λ_high]`.
pub fn gaussian_envelope(
    mean_bounds: (f64, f64),
    precision_eigs: (f64, f64),
    x: &[f64],
) -> Result<(f64, f64)> {
    let (m, big_m) = mean_bounds;
    let (l_lo, l_hi) = precision_eigs;
    if !(0.0 <= m && m <= big_m && big_m.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!(
            "mean bounds ({m}, {big_m}) are inverted or negative"
        )));
    }
    if !(0.0 < l_lo && l_lo <= l_hi && l_hi.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!(
            "precision bounds ({l_lo}, {l_hi}) are inverted or not positive"
        )));
    }
    let d = x.len() as f64;
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    let base = powf(2.0 * core::f64::consts::PI, -d / 2.0);
    // The middle case of α is a constant, so c̄ absorbs it.
    let c_up = base * powf(l_hi, d / 2.0) * exp(l_lo * (big_m - m) * (big_m - m) / 2.0);
    let c_lo = base * powf(l_lo, d / 2.0) * exp(-l_hi * big_m * big_m);
    Ok((
        c_lo * exp(-l_hi * norm2),
        c_up * exp(-l_lo * gaussian_alpha(sqrt(norm2), m, big_m)),
    ))
}

/// A Gaussian with precision `Σ_i l_i r_i r_iᵀ` for an orthonormal basis `r`.
#[derive(Debug, Clone)]
pub struct GaussianSample {
    pub mean: Vec<f64>,
    pub eigs: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
}

impl GaussianSample {
    pub fn density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let det: f64 = self.eigs.iter().product();
        let q: f64 = self
            .eigs
            .iter()
            .zip(&self.basis)
            .map(|(l, r)| {
                let p: f64 = r
                    .iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((a, b), c)| a * (b - c))
                    .sum();
                l * p * p
            })
            .sum();
        powf(2.0 * core::f64::consts::PI, -d / 2.0) * sqrt(det) * exp(-q / 2.0)
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random Gaussian inside the bounds: mean norm uniform in `[m, M]`, random
/// rotation, eigenvalues uniform in `[λ_low, λ_high]`.
pub(crate) fn sample_gaussian<R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    mean_bounds: (f64, f64),
    eigs: (f64, f64),
) -> GaussianSample {
    let dir = normal_vec(rng, d);
    let n = sqrt(dir.iter().map(|v| v * v).sum::<f64>());
    let r = uniform(rng, mean_bounds.0, mean_bounds.1);
    let mean = dir.iter().map(|v| v / n * r).collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = normal_vec(rng, d);
        for b in &basis {
            let p: f64 = b.iter().zip(&v).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let n = sqrt(v.iter().map(|a| a * a).sum::<f64>());
        if n > 1e-6 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let eigs = (0..d).map(|_| uniform(rng, eigs.0, eigs.1)).collect();
    GaussianSample { mean, eigs, basis }
}
