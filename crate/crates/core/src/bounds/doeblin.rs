use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::certificate::{certify_variational, KernelBounds};
use super::Verdict;
use crate::inference::tv;
use crate::math::powi;
use crate::rng::{rng_from_seed, simplex_point};
use crate::variational::VariationalLaw;

/// Result of the contraction check on one variational law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoeblinReport {
    pub rho: f64,
    pub trials: usize,
    pub verdict: Verdict,
}

/// `μ Q_{t|t+1}`: push a law on `x_{t+1}` through the kernel into `x_t`.
fn push(law: &VariationalLaw, t: usize, mu: &[f64]) -> Vec<f64> {
    let k = law.states;
    let mut out = vec![0.0; k];
    for (xt, &w) in mu.iter().enumerate() {
        for (o, &q) in out.iter_mut().zip(law.kernel_row(t, xt)) {
            *o += w * q;
        }
    }
    out
}

/// Checks `‖μ Q_{s|s+1}…Q_{t-1|t} − ν Q…‖_tv ≤ ρ^{t-s} ‖μ − ν‖_tv` for random
/// laws `μ, ν` on `x_t` and random `s < t`.
pub fn doeblin_contraction_check(law: &VariationalLaw, trials: usize, seed: u64) -> DoeblinReport {
    let cert = match certify_variational(&KernelBounds::from_law(law)) {
        Ok(c) => c,
        Err(v) => {
            return DoeblinReport {
                rho: 1.0,
                trials: 0,
                verdict: Verdict::Inapplicable {
                    reason: format!(
                        "no minorization: {} entry ({}, {}) = {}",
                        v.table, v.row, v.col, v.value
                    ),
                },
            }
        }
    };
    let big_t = law.horizon();
    if big_t == 0 {
        return DoeblinReport {
            rho: cert.rho,
            trials: 0,
            verdict: Verdict::Inapplicable {
                reason: "no kernels at T = 0".into(),
            },
        };
    }
    let rho = cert.rho.max(0.0);
    let k = law.states;
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let top = rng.random_range(1..=big_t);
        let bottom = rng.random_range(0..top);
        let mut mu = simplex_point(&mut rng, k);
        let mut nu = simplex_point(&mut rng, k);
        let d0 = tv(&mu, &nu);
        for t in (bottom + 1..=top).rev() {
            mu = push(law, t, &mu);
            nu = push(law, t, &nu);
        }
        let d = tv(&mu, &nu);
        let rhs = powi(rho, (top - bottom) as i32) * d0;
        if d > rhs + 1e-12 {
            return DoeblinReport {
                rho,
                trials,
                verdict: Verdict::Violated {
                    witness: format!("steps {}..{}: tv {d:e} > rho^n tv0 {rhs:e}", bottom, top),
                },
            };
        }
        if rhs > 0.0 {
            worst = worst.max(d / rhs);
        }
    }
    DoeblinReport {
        rho,
        trials,
        verdict: Verdict::Holds { worst_ratio: worst },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn law(kernels: Vec<Vec<f64>>, k: usize) -> VariationalLaw {
        VariationalLaw {
            states: k,
            terminal: vec![1.0 / k as f64; k],
            kernels,
        }
    }

    #[test]
    fn rank_one_kernels_merge_in_one_step() {
        let row = [0.5, 0.5];
        let q = law(vec![[row, row].concat(); 3], 2);
        let r = doeblin_contraction_check(&q, 200, 1);
        assert!(r.rho.abs() < 1e-15);
        assert!(!r.verdict.is_violated());
        let mu = push(&q, 1, &[1.0, 0.0]);
        let nu = push(&q, 1, &[0.0, 1.0]);
        assert!(tv(&mu, &nu) == 0.0);
    }

    #[test]
    fn identity_kernels_are_skipped() {
        let q = law(vec![vec![1.0, 0.0, 0.0, 1.0]], 2);
        let r = doeblin_contraction_check(&q, 10, 1);
        assert!(matches!(r.verdict, Verdict::Inapplicable { .. }));
    }

    #[test]
    fn random_laws_contract() {
        let mut rng = rng_from_seed(5);
        for i in 0..500 {
            let k = rng.random_range(1..=4);
            let big_t = rng.random_range(1..=6);
            let kernels = (0..big_t)
                .map(|_| (0..k).flat_map(|_| simplex_point(&mut rng, k)).collect())
                .collect();
            let r = doeblin_contraction_check(&law(kernels, k), 20, i);
            assert!(!r.verdict.is_violated(), "{:?}", r.verdict);
        }
    }
}
