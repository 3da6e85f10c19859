use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::certificate::{MixingCertificate, VariationalCertificate};
use super::envelopes::{KernelEnvelopes, ModelEnvelopes};
use crate::inference::InferenceResult;
use crate::math::{ln, powi};
use crate::ssm::{FiniteSSM, SequenceLaw};
use crate::variational::VariationalLaw;

fn mu_g_env(env: &ModelEnvelopes, y: usize) -> f64 {
    (0..env.states).map(|x| env.g(y, x)).sum()
}

/// `η_+ ⊗ μ(M ḡ^a ⊗ ḡ^b) = K^{-1} Σ_{x,x'} M(x,x') ḡ^a(x) ḡ^b(x')`.
fn eta_mu_mgg(cert: &MixingCertificate, env: &ModelEnvelopes, a: usize, b: usize) -> f64 {
    let k = cert.states;
    let mut s = 0.0;
    for x in 0..k {
        for xn in 0..k {
            s += env.m(x, xn) * cert.gbar(a, x) * cert.gbar(b, xn);
        }
    }
    s / k as f64
}

/// `μ(Z ḡ^{y_0})`, the initial-law term.
fn mu_zg(cert: &MixingCertificate, env: &ModelEnvelopes, y0: usize) -> f64 {
    (0..cert.states)
        .map(|x| env.init[x] * cert.gbar(y0, x))
        .sum()
}

/// Filter TV-Lipschitz constants `L_0, ..., L_T` for the prefixes of `y`.
pub fn filter_lipschitz_all(
    cert: &MixingCertificate,
    env: &ModelEnvelopes,
    y: &[usize],
) -> Vec<f64> {
    let (sm, sp, eps) = (cert.sigma_minus, cert.sigma_plus, cert.epsilon);
    let pre = 4.0 * sp * sp / (sm * sm);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(y.len());
    for s in 0..y.len() {
        let a = if s == 0 {
            mu_zg(cert, env, y[0])
        } else {
            eta_mu_mgg(cert, env, y[s - 1], y[s]) / (sm * cert.c_minus[y[s - 1]])
        };
        let term = (a + mu_g_env(env, y[s])) / cert.c_minus[y[s]];
        acc = eps * acc + term;
        out.push(pre * acc);
    }
    out
}

pub fn filter_lipschitz_l(
    cert: &MixingCertificate,
    env: &ModelEnvelopes,
    y: &[usize],
    t: usize,
) -> f64 {
    filter_lipschitz_all(cert, env, &y[..=t])[t]
}

/// Pointwise filter bounds at every `(t, x)`.
pub fn filter_bounds(
    cert: &MixingCertificate,
    model: &FiniteSSM,
    y: &[usize],
) -> Vec<Vec<(f64, f64)>> {
    let (sa_m, sa_p) = cert.pointwise_sigma();
    y.iter()
        .map(|&yt| {
            let (ca_m, ca_p) = cert.pointwise_c(yt);
            (0..cert.states)
                .map(|x| {
                    let g = model.emit(x, yt);
                    (sa_m * g / (sa_p * ca_p), sa_p * g / (sa_m * ca_m))
                })
                .collect()
        })
        .collect()
}

/// Bounds on `b_{t-1|t}(·, x')` in both printed versions, indexed
/// `[t-1][x']`. Neither depends on `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardBounds {
    pub statement: Vec<Vec<(f64, f64)>>,
    pub proof: Vec<Vec<(f64, f64)>>,
}

impl BackwardBounds {
    /// Elementwise looser of the two versions.
    pub fn looser(&self, t: usize, x: usize) -> (f64, f64) {
        let (a, b) = self.statement[t - 1][x];
        let (c, d) = self.proof[t - 1][x];
        (a.min(c), b.max(d))
    }
}

pub fn backward_bounds(cert: &MixingCertificate, model: &FiniteSSM, y: &[usize]) -> BackwardBounds {
    let (sa_m, sa_p) = cert.pointwise_sigma();
    let r2 = (sa_m * sa_m) / (sa_p * sa_p);
    let mut statement = Vec::new();
    let mut proof = Vec::new();
    for t in 1..y.len() {
        let a = y[t - 1];
        let (ca_m, ca_p) = cert.pointwise_c(a);
        let mut s = Vec::with_capacity(cert.states);
        let mut p = Vec::with_capacity(cert.states);
        for x in 0..cert.states {
            let g = model.emit(x, a);
            let lo = r2 * g / ca_p;
            let hi = g / (r2 * ca_m);
            s.push((lo, hi));
            p.push((lo * ca_m, hi * ca_p));
        }
        statement.push(s);
        proof.push(p);
    }
    BackwardBounds { statement, proof }
}

/// `sup |ln b|` over the family-level backward bounds at symbol `a`.
fn backward_log_bound(cert: &MixingCertificate, a: usize) -> f64 {
    let (sa_m, sa_p) = cert.pointwise_sigma();
    let (ca_m, ca_p) = cert.pointwise_c(a);
    let r2 = (sa_m * sa_m) / (sa_p * sa_p);
    (0..cert.states)
        .map(|x| {
            let lo_s = r2 * cert.gunder(a, x) / ca_p;
            let hi_s = cert.gbar(a, x) / (r2 * ca_m);
            let lo = lo_s.min(lo_s * ca_m);
            let hi = hi_s.max(hi_s * ca_p).min(1.0);
            ln(lo).abs().max(ln(hi).abs())
        })
        .fold(0.0, f64::max)
}

/// `sup |ln φ_T|` from the filter bounds at symbol `a`.
fn filter_log_bound(cert: &MixingCertificate, a: usize) -> f64 {
    let (sa_m, sa_p) = cert.pointwise_sigma();
    let (ca_m, ca_p) = cert.pointwise_c(a);
    (0..cert.states)
        .map(|x| {
            let lo = sa_m * cert.gunder(a, x) / (sa_p * ca_p);
            let hi = (sa_p * cert.gbar(a, x) / (sa_m * ca_m)).min(1.0);
            ln(lo).abs().max(ln(hi).abs())
        })
        .fold(0.0, f64::max)
}

/// Explicit bound on `sup |h_t|` for `t = 1..=T`; for `T = 0` the single
/// entry bounds the terminal function `ln q_T - ln φ_0`.
pub fn upsilon_explicit(
    cert: &MixingCertificate,
    vcert: &VariationalCertificate,
    y: &[usize],
) -> Vec<f64> {
    let (q_lo, q_hi) = vcert.pointwise(cert.states);
    let qlog = ln(q_lo).abs().max(ln(q_hi.min(1.0)).abs());
    let big_t = y.len() - 1;
    if big_t == 0 {
        return vec![qlog + filter_log_bound(cert, y[0])];
    }
    (1..=big_t)
        .map(|t| {
            let b = backward_log_bound(cert, y[t - 1]);
            if t < big_t {
                qlog + b
            } else {
                2.0 * qlog + b + filter_log_bound(cert, y[big_t])
            }
        })
        .collect()
}

/// Direct values of `h_t`: sup-norm and uniform-measure integral.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HTable {
    pub sup_norm: Vec<f64>,
    pub lambda_integral: Vec<f64>,
}

/// `h_t(x_{t-1}, x_t) = ln q_{t-1|t} - ln b_{t-1|t}`, with the terminal
/// log-ratio added at `t = T`. For `T = 0` the table holds the terminal term.
pub fn compute_h_functions(q: &VariationalLaw, inf: &InferenceResult) -> HTable {
    let k = q.states;
    let big_t = q.horizon();
    let lr = |a: f64, b: f64| {
        if a > 0.0 && b > 0.0 {
            ln(a) - ln(b)
        } else if a == b {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let term: Vec<f64> = (0..k)
        .map(|x| lr(q.terminal[x], inf.filters[big_t][x]))
        .collect();
    if big_t == 0 {
        let sup = term.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let int = term.iter().map(|v| v.abs()).sum::<f64>() / k as f64;
        return HTable {
            sup_norm: vec![sup],
            lambda_integral: vec![int],
        };
    }
    let mut sup_norm = Vec::with_capacity(big_t);
    let mut lambda_integral = Vec::with_capacity(big_t);
    for t in 1..=big_t {
        let mut sup = 0.0f64;
        let mut int = 0.0;
        for xt in 0..k {
            for xp in 0..k {
                let mut h = lr(q.kernel_row(t, xt)[xp], inf.backward_row(t, xt)[xp]);
                if t == big_t {
                    h += term[xt];
                }
                sup = sup.max(h.abs());
                int += h.abs();
            }
        }
        sup_norm.push(sup);
        lambda_integral.push(int / (k * k) as f64);
    }
    HTable {
        sup_norm,
        lambda_integral,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralConstants {
    /// `c_{1,t}`, `t = 1..=T`.
    pub c1: Vec<f64>,
    /// `c_{2,t}`, `t = 1..=T`.
    pub c2: Vec<f64>,
    pub c3: f64,
    pub c4: f64,
}

/// Integral Lipschitz constants of `ln q`, `ln b`, `ln q_T`, `ln φ_T`.
///
/// `c_2` carries the transition-envelope term that the change of `m_θ`
/// inside `b_θ` produces; without it the bound fails for families whose
/// transition depends on `θ`.
pub fn compute_integral_constants(
    cert: &MixingCertificate,
    env: &ModelEnvelopes,
    vcert: &VariationalCertificate,
    kenv: &KernelEnvelopes,
    y: &[usize],
    lt: &[f64],
) -> Result<IntegralConstants, String> {
    let k = cert.states;
    let kf = k as f64;
    let big_t = y.len() - 1;
    let (sm, sp) = (cert.sigma_minus, cert.sigma_plus);
    let (sa_m, sa_p) = cert.pointwise_sigma();
    let c1 = kenv
        .kernels
        .iter()
        .map(|e| e.iter().sum::<f64>() / vcert.theta_minus)
        .collect();
    let c3 = kenv.terminal.iter().sum::<f64>() / vcert.theta_minus;
    let mut c2 = Vec::with_capacity(big_t);
    for t in 1..=big_t {
        let a = y[t - 1];
        let gmin = cert.gunder_min(a);
        if !(gmin > 0.0) {
            return Err(format!("inf_x g^{a}(x) = 0, c2 at t = {t} is undefined"));
        }
        let (ca_m, ca_p) = cert.pointwise_c(a);
        let mut gm = 0.0;
        for x in 0..k {
            for xp in 0..k {
                gm += cert.gbar(a, xp) * env.m(xp, x);
            }
        }
        let num = (2.0 / sa_m) * (2.0 * kf * sa_p * lt[t - 1] + sa_p / (sa_m * ca_m) * gm);
        let blow_min = sa_m * sa_m * gmin / (sa_p * sa_p * ca_p);
        c2.push(num / (kf * kf * blow_min));
    }
    let gmin = cert.gunder_min(y[big_t]);
    if !(gmin > 0.0) {
        return Err(format!("inf_x g^{}(x) = 0, c4 is undefined", y[big_t]));
    }
    let c4 = 2.0 * sp * cert.c_plus[y[big_t]] * lt[big_t] / (sm * gmin);
    Ok(IntegralConstants { c1, c2, c3, c4 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappas {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
}

impl Kappas {
    pub fn theta_coefficient(&self) -> f64 {
        self.kappa1 + self.kappa4
    }

    pub fn phi_coefficient(&self) -> f64 {
        self.kappa2 + self.kappa3
    }
}

pub fn compute_kappas(
    cert: &MixingCertificate,
    env: &ModelEnvelopes,
    vcert: &VariationalCertificate,
    kenv: &KernelEnvelopes,
    y: &[usize],
    lt: &[f64],
    upsilon: &[f64],
    integrals: &IntegralConstants,
) -> Kappas {
    let kf = cert.states as f64;
    let big_t = y.len() - 1;
    let (sm, sp) = (cert.sigma_minus, cert.sigma_plus);
    let eta_g = |s: usize| mu_g_env(env, s) / kf;

    let mut kappa1 = (sp * eta_g(y[0]) + mu_zg(cert, env, y[0])) / (sm * cert.c_minus[y[0]]);
    for t in 1..=big_t {
        let inner = cert.c_plus[y[t]] * lt[t - 1]
            + eta_mu_mgg(cert, env, y[t - 1], y[t]) / (sm * cert.c_minus[y[t - 1]])
            + eta_g(y[t]);
        kappa1 += sp / (sm * cert.c_minus[y[t]]) * inner;
    }

    let (tp, rho) = (vcert.theta_plus, vcert.rho);
    let sum_k = |t: usize| kenv.kernels[t - 1].iter().sum::<f64>();
    let sum_kt: f64 = kenv.terminal.iter().sum();
    let kappa2 = if big_t == 0 {
        sum_kt * upsilon[0]
    } else {
        (1..=big_t)
            .map(|t| {
                let own = tp * sum_k(t) / kf;
                let later: f64 = (t..big_t)
                    .map(|s| sum_k(s + 1) / kf * powi(rho, (s - t) as i32))
                    .sum();
                let terminal = tp * sum_kt * powi(rho, (big_t - t) as i32);
                upsilon[t - 1] * (own + tp * tp * later + terminal)
            })
            .sum()
    };
    let kappa3 = tp * (tp * integrals.c1.iter().sum::<f64>() + integrals.c3);
    let kappa4 = tp * (tp * integrals.c2.iter().sum::<f64>() + integrals.c4);
    Kappas {
        kappa1,
        kappa2,
        kappa3,
        kappa4,
    }
}

/// Every constant attached to one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub variational: VariationalCertificate,
    /// `L_t`, `t = 0..=T`.
    pub lt: Vec<f64>,
    pub upsilon: Vec<f64>,
    pub integrals: IntegralConstants,
    pub kappas: Kappas,
}

impl BoundConstants {
    pub fn compute(
        cert: &MixingCertificate,
        env: &ModelEnvelopes,
        vcert: &VariationalCertificate,
        kenv: &KernelEnvelopes,
        y: &[usize],
    ) -> Result<Self, String> {
        let lt = filter_lipschitz_all(cert, env, y);
        let upsilon = upsilon_explicit(cert, vcert, y);
        let integrals = compute_integral_constants(cert, env, vcert, kenv, y, &lt)?;
        let kappas = compute_kappas(cert, env, vcert, kenv, y, &lt, &upsilon, &integrals);
        Ok(Self {
            variational: *vcert,
            lt,
            upsilon,
            integrals,
            kappas,
        })
    }
}

/// Exact expectations of the moment quantities under a sequence law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub items: Vec<(String, f64)>,
    pub a_hat: f64,
    pub argmax: String,
}

/// Moment expectations for the data law `law`; `constants(y)` supplies the
/// per-sequence constants and kernel envelopes.
pub fn moment_constants<F>(
    cert: &MixingCertificate,
    env: &ModelEnvelopes,
    law: &SequenceLaw,
    mut constants: F,
) -> Result<MomentReport, String>
where
    F: FnMut(&[usize]) -> Result<(BoundConstants, KernelEnvelopes), String>,
{
    let big_t = law.horizon;
    let kf = cert.states as f64;
    let mut e = MomentAccumulator::default();
    let cm = &cert.c_minus;
    let cp = &cert.c_plus;
    for (y, p) in law.support() {
        let (bc, kenv) = constants(&y)?;
        let tp = bc.variational.theta_plus;
        let rho = bc.variational.rho;
        e.add("(theta+ c3)^2", p * sq(tp * bc.integrals.c3));
        e.add("(theta+ c4)^2", p * sq(tp * bc.integrals.c4));
        for t in 0..=big_t {
            e.add(
                &format!("mu(G)^2/c-^2 t={t}"),
                p * sq(mu_g_env(env, y[t]) / cm[y[t]]),
            );
        }
        for t in 1..=big_t {
            e.add(
                &format!("(theta+^2 c1) t={t}"),
                p * sq(tp * tp * bc.integrals.c1[t - 1]),
            );
            e.add(
                &format!("(theta+^2 c2) t={t}"),
                p * sq(tp * tp * bc.integrals.c2[t - 1]),
            );
            let m = eta_mu_mgg(cert, env, y[t - 1], y[t]);
            e.add(
                &format!("Mgg^2/c-^2c-^2 t={t}"),
                p * sq(m / (cm[y[t - 1]] * cm[y[t]])),
            );
            let s: f64 = (t - 1..big_t)
                .map(|s| {
                    kenv.kernels[s].iter().sum::<f64>() / (kf * kf)
                        * crate::math::powf(rho, s as f64 - t as f64)
                })
                .sum();
            e.add(&format!("theta+ sum K rho t={t}"), p * sq(tp * s));
        }
        for t in 0..=big_t {
            for s in 0..=big_t {
                let v = cp[y[t]] * mu_g_env(env, y[s]) / (cm[y[t]] * cm[y[s]]);
                e.add(&format!("c+ mu(G)/c-c- s={s} t={t}"), p * v * v);
                if s >= 1 {
                    let m = eta_mu_mgg(cert, env, y[s - 1], y[s]);
                    let v = cp[y[t]] * m / (cm[y[s - 1]] * cm[y[s]] * cm[y[t]]);
                    e.add(&format!("c+ Mgg/c-c-c- s={s} t={t}"), p * v * v);
                }
            }
        }
    }
    let (argmax, a_hat) =
        e.items
            .iter()
            .fold((String::new(), f64::NEG_INFINITY), |(n, v), (m, w)| {
                if *w > v {
                    (m.clone(), *w)
                } else {
                    (n, v)
                }
            });
    Ok(MomentReport {
        items: e.items,
        a_hat,
        argmax,
    })
}

#[derive(Default)]
struct MomentAccumulator {
    items: Vec<(String, f64)>,
}

impl MomentAccumulator {
    fn add(&mut self, name: &str, v: f64) {
        match self.items.iter_mut().find(|(n, _)| n == name) {
            Some((_, acc)) => *acc += v,
            None => self.items.push((String::from(name), v)),
        }
    }
}

fn sq(v: f64) -> f64 {
    v * v
}
