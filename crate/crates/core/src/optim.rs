//! Projected gradient descent on a box with Barzilai-Borwein steps and
//! Armijo backtracking along the projection arc.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ssm::ParamBox;

pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    /// Writes the gradient into `grad` and returns the value.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Relative loss-decrease tolerance.
    pub tol: f64,
    /// Sup-norm tolerance on the projected gradient step.
    pub gtol: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol: 1e-10,
            gtol: 1e-9,
            armijo: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    /// Loss after each accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn projected_step_norm(bounds: &ParamBox, x: &[f64], g: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for i in 0..x.len() {
        let y = (x[i] - g[i]).max(bounds.lower[i]).min(bounds.upper[i]);
        m = m.max((y - x[i]).abs());
    }
    m
}

pub fn projected_gradient<O: Objective + ?Sized>(
    obj: &O,
    bounds: &ParamBox,
    x0: &[f64],
    opts: &OptimOptions,
) -> OptimOutcome {
    let n = obj.dim();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = obj.value_and_gradient(&x, &mut g);
    let mut trace = vec![f];
    if !f.is_finite() {
        return OptimOutcome {
            x,
            value: f,
            trace,
            iterations: 0,
            converged: false,
        };
    }
    let mut step = 1.0;
    let mut small = 0usize;
    let mut converged = false;
    let mut iterations = 0;
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    while iterations < opts.max_iter {
        if projected_step_norm(bounds, &x, &g) <= opts.gtol {
            converged = true;
            break;
        }
        iterations += 1;
        let mut alpha = step;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut descent = 0.0;
            for i in 0..n {
                xn[i] = (x[i] - alpha * g[i])
                    .max(bounds.lower[i])
                    .min(bounds.upper[i]);
                descent += g[i] * (xn[i] - x[i]);
            }
            let fv = obj.value(&xn);
            if fv.is_finite() && fv <= f + opts.armijo * descent {
                accepted = Some(fv);
                break;
            }
            alpha *= 0.5;
        }
        let Some(_) = accepted else {
            converged = projected_step_norm(bounds, &x, &g) <= 1e-6;
            break;
        };
        let fnew = obj.value_and_gradient(&xn, &mut gn);
        let mut ss = 0.0;
        let mut sy = 0.0;
        for i in 0..n {
            let s = xn[i] - x[i];
            ss += s * s;
            sy += s * (gn[i] - g[i]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            (alpha * 2.0).min(1e10)
        };
        let decrease = f - fnew;
        core::mem::swap(&mut x, &mut xn);
        core::mem::swap(&mut g, &mut gn);
        f = fnew;
        trace.push(f);
        if decrease <= opts.tol * f.abs().max(1.0) {
            small += 1;
            if small >= 3 {
                converged = true;
                break;
            }
        } else {
            small = 0;
        }
    }
    OptimOutcome {
        x,
        value: f,
        trace,
        iterations,
        converged,
    }
}

/// Central finite-difference gradient with step `h`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64, grad: &mut [f64]) {
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        center: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.center.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            x.iter()
                .zip(&self.center)
                .enumerate()
                .map(|(i, (a, c))| (i + 1) as f64 * (a - c) * (a - c))
                .sum()
        }
        fn value_and_gradient(&self, x: &[f64], g: &mut [f64]) -> f64 {
            for i in 0..x.len() {
                g[i] = 2.0 * (i + 1) as f64 * (x[i] - self.center[i]);
            }
            self.value(x)
        }
    }

    #[test]
    fn finds_interior_minimum() {
        let q = Quadratic {
            center: vec![0.3, -0.7, 1.1],
        };
        let out = projected_gradient(
            &q,
            &ParamBox::symmetric(3, 5.0),
            &[4.0, 4.0, -4.0],
            &OptimOptions::default(),
        );
        assert!(out.converged);
        for (a, b) in out.x.iter().zip(&q.center) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn stops_on_the_boundary() {
        let q = Quadratic {
            center: vec![3.0, -0.5],
        };
        let out = projected_gradient(
            &q,
            &ParamBox::symmetric(2, 1.0),
            &[0.0, 0.0],
            &OptimOptions::default(),
        );
        assert_eq!(out.x[0], 1.0);
        assert!((out.x[1] + 0.5).abs() < 1e-8);
    }

    #[test]
    fn central_difference_matches_quadratic_gradient() {
        let q = Quadratic {
            center: vec![0.1, 0.2],
        };
        let x = [0.5, -0.4];
        let mut g = [0.0; 2];
        let mut fd = [0.0; 2];
        q.value_and_gradient(&x, &mut g);
        central_difference(|v| q.value(v), &x, 1e-6, &mut fd);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
