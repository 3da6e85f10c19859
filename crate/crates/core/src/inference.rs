//! Exact filtering, backward kernels and the path-enumeration oracle.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ln;
use crate::ssm::{checked_count, FiniteSSM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub states: usize,
    /// `filters[t][x] = Φ_t(x)`.
    pub filters: Vec<Vec<f64>>,
    /// `backward[t-1][x_t * K + x_{t-1}] = b_{t-1|t}(x_t, x_{t-1})` for `t = 1..=T`.
    pub backward: Vec<Vec<f64>>,
    pub loglik: f64,
    /// `log p(y_t | y_{0:t-1})`.
    pub step_logliks: Vec<f64>,
    /// `(t, x_t)` pairs whose backward row had no mass and was set uniform.
    pub degenerate_rows: Vec<(usize, usize)>,
}

impl InferenceResult {
    pub fn horizon(&self) -> usize {
        self.filters.len() - 1
    }

    /// Row `x_t` of the kernel `B_{t-1|t}`.
    pub fn backward_row(&self, t: usize, x_t: usize) -> &[f64] {
        let k = self.states;
        &self.backward[t - 1][x_t * k..(x_t + 1) * k]
    }
}

/// Normalized forward recursion, followed by the backward kernels.
pub fn filter_forward(model: &FiniteSSM, y: &[usize]) -> Result<InferenceResult> {
    if y.is_empty() {
        return Err(Error::InvalidCount("observation sequence is empty"));
    }
    model.check_sequence(y)?;
    let k = model.states();
    let mut filters = Vec::with_capacity(y.len());
    let mut step_logliks = Vec::with_capacity(y.len());
    let mut phi = vec![0.0; k];
    for (t, &yt) in y.iter().enumerate() {
        let mut next = vec![0.0; k];
        for (xn, v) in next.iter_mut().enumerate() {
            let pred = if t == 0 {
                model.init(xn)
            } else {
                (0..k).map(|x| phi[x] * model.trans(x, xn)).sum()
            };
            *v = pred * model.emit(xn, yt);
        }
        let z: f64 = next.iter().sum();
        if !(z > 0.0) {
            return Err(Error::ImpossibleObservation { time: t });
        }
        for v in next.iter_mut() {
            *v /= z;
        }
        step_logliks.push(ln(z));
        filters.push(next.clone());
        phi = next;
    }
    let loglik = step_logliks.iter().sum();
    let (backward, degenerate_rows) = backward_kernels(model, &filters);
    Ok(InferenceResult {
        states: k,
        filters,
        backward,
        loglik,
        step_logliks,
        degenerate_rows,
    })
}

/// `B_{t-1|t}(x_t, ·) ∝ Φ_{t-1}(·) m(·, x_t)`. Rows with no mass become
/// uniform and are reported.
pub fn backward_kernels(
    model: &FiniteSSM,
    filters: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<(usize, usize)>) {
    let k = model.states();
    let mut out = Vec::with_capacity(filters.len().saturating_sub(1));
    let mut degenerate = Vec::new();
    for t in 1..filters.len() {
        let prev = &filters[t - 1];
        let mut kernel = vec![0.0; k * k];
        for xt in 0..k {
            let row = &mut kernel[xt * k..(xt + 1) * k];
            for (xp, r) in row.iter_mut().enumerate() {
                *r = prev[xp] * model.trans(xp, xt);
            }
            let z: f64 = row.iter().sum();
            if z > 0.0 {
                for r in row.iter_mut() {
                    *r /= z;
                }
            } else {
                row.fill(1.0 / k as f64);
                degenerate.push((t, xt));
            }
        }
        out.push(kernel);
    }
    (out, degenerate)
}

/// Law of the whole latent path, indexed base-`K` with `x_0` least significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathPosterior {
    pub states: usize,
    pub horizon: usize,
    pub probs: Vec<f64>,
    /// `log L_T` when the table came from direct normalization.
    pub log_normalizer: Option<f64>,
}

impl PathPosterior {
    pub fn path(&self, index: usize) -> Vec<usize> {
        crate::ssm::decode_sequence(index, self.states, self.horizon + 1)
    }

    pub fn prob(&self, x: &[usize]) -> f64 {
        self.probs[crate::ssm::encode_sequence(x, self.states)]
    }
}

/// `Φ_T(x_T) Π_t B_{t-1|t}(x_t, x_{t-1})` over every path.
pub fn smoothing_from_backward(result: &InferenceResult, cap: usize) -> Result<PathPosterior> {
    let k = result.states;
    let horizon = result.horizon();
    let total = checked_count(k, horizon + 1, cap)?;
    let mut probs = Vec::with_capacity(total);
    for idx in 0..total {
        let x = crate::ssm::decode_sequence(idx, k, horizon + 1);
        let mut p = result.filters[horizon][x[horizon]];
        for t in (1..=horizon).rev() {
            p *= result.backward_row(t, x[t])[x[t - 1]];
        }
        probs.push(p);
    }
    Ok(PathPosterior {
        states: k,
        horizon,
        probs,
        log_normalizer: None,
    })
}

/// Direct normalization of the joint density over all latent paths.
pub fn enumerate_posterior(model: &FiniteSSM, y: &[usize], cap: usize) -> Result<PathPosterior> {
    if y.is_empty() {
        return Err(Error::InvalidCount("observation sequence is empty"));
    }
    model.check_sequence(y)?;
    let k = model.states();
    let horizon = y.len() - 1;
    let total = checked_count(k, horizon + 1, cap)?;
    let mut probs: Vec<f64> = (0..total)
        .map(|idx| model.joint(&crate::ssm::decode_sequence(idx, k, horizon + 1), y))
        .collect();
    let z: f64 = probs.iter().sum();
    if !(z > 0.0) {
        return Err(Error::ImpossibleObservation { time: horizon });
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    Ok(PathPosterior {
        states: k,
        horizon,
        probs,
        log_normalizer: Some(ln(z)),
    })
}

/// `½ Σ |p - q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(tv(p, q))
}

#[inline]
pub(crate) fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::build_finite_ssm;

    fn uninformative() -> FiniteSSM {
        FiniteSSM::from_tables(2, 2, vec![0.5; 4], vec![0.3, 0.7, 0.3, 0.7], vec![0.5, 0.5])
            .unwrap()
    }

    #[test]
    fn uninformative_filters_are_uniform() {
        let m = uninformative();
        let y = [0, 1, 1, 0];
        let r = filter_forward(&m, &y).unwrap();
        for f in &r.filters {
            assert_eq!(f, &vec![0.5, 0.5]);
        }
        let expected = 2.0 * ln(0.3) + 2.0 * ln(0.7);
        assert!((r.loglik - expected).abs() < 1e-12);
    }

    #[test]
    fn identity_emission_pins_the_state() {
        let m = FiniteSSM::from_tables(
            3,
            3,
            vec![0.2, 0.3, 0.5, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![0.3, 0.3, 0.4],
        )
        .unwrap();
        let y = [2, 0, 1, 1];
        let r = filter_forward(&m, &y).unwrap();
        for (t, f) in r.filters.iter().enumerate() {
            for (x, &p) in f.iter().enumerate() {
                assert_eq!(p, if x == y[t] { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn impossible_observation_is_an_error() {
        let m = FiniteSSM::from_tables(1, 2, vec![1.0], vec![1.0, 0.0], vec![1.0]).unwrap();
        assert_eq!(
            filter_forward(&m, &[0, 1]).unwrap_err(),
            Error::ImpossibleObservation { time: 1 }
        );
    }

    #[test]
    fn iid_chain_backward_rows_equal_previous_filter() {
        let m = FiniteSSM::from_tables(
            2,
            2,
            vec![0.3, 0.7, 0.3, 0.7],
            vec![0.9, 0.1, 0.2, 0.8],
            vec![0.5, 0.5],
        )
        .unwrap();
        let r = filter_forward(&m, &[0, 1, 1]).unwrap();
        for t in 1..=2 {
            for xt in 0..2 {
                let row = r.backward_row(t, xt);
                for (a, b) in row.iter().zip(&r.filters[t - 1]) {
                    assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn single_state_backward_is_one() {
        let m = build_finite_ssm(&[0.2], 1, 2).unwrap();
        let r = filter_forward(&m, &[0, 1, 0]).unwrap();
        assert!(r.backward.iter().all(|b| b == &vec![1.0]));
    }

    #[test]
    fn zero_mass_backward_row_is_flagged() {
        // State 1 is never entered from state 0 and Φ_0 sits on state 0.
        let m = FiniteSSM::from_tables(
            2,
            2,
            vec![1.0, 0.0, 0.5, 0.5],
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.5, 0.5],
        )
        .unwrap();
        let r = filter_forward(&m, &[0, 0]).unwrap();
        assert_eq!(r.degenerate_rows, vec![(1, 1)]);
        assert_eq!(r.backward_row(1, 1), &[0.5, 0.5]);
    }

    #[test]
    fn horizon_zero_posterior_is_the_filter() {
        let m = build_finite_ssm(&[0.2, -0.3, 1.0, 0.5, 0.1], 2, 2).unwrap();
        let r = filter_forward(&m, &[1]).unwrap();
        let post = smoothing_from_backward(&r, 100).unwrap();
        assert_eq!(post.probs, r.filters[0]);
    }

    #[test]
    fn permutation_transition_has_few_paths() {
        let m = FiniteSSM::from_tables(
            3,
            2,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            vec![0.6, 0.4, 0.3, 0.7, 0.5, 0.5],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let post = enumerate_posterior(&m, &[0, 1, 1, 0], 1000).unwrap();
        assert!(post.probs.iter().filter(|&&p| p > 0.0).count() <= 3);
        let r = filter_forward(&m, &[0, 1, 1, 0]).unwrap();
        let back = smoothing_from_backward(&r, 1000).unwrap();
        assert!(back.probs.iter().filter(|&&p| p > 0.0).count() <= 3);
    }

    #[test]
    fn single_state_enumeration_is_one_path() {
        let m = build_finite_ssm(&[0.2], 1, 2).unwrap();
        let post = enumerate_posterior(&m, &[0, 1, 1], 10).unwrap();
        assert_eq!(post.probs, vec![1.0]);
    }

    #[test]
    fn uniform_model_has_uniform_posterior() {
        let m = build_finite_ssm(&[0.0; 5], 2, 2).unwrap();
        let post = enumerate_posterior(&m, &[0, 1, 0], 100).unwrap();
        assert!(post.probs.iter().all(|&p| (p - 0.125).abs() < 1e-15));
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance(&[0.7, 0.3], &[0.4, 0.6]).unwrap() - 0.3).abs() < 1e-15);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }
}
