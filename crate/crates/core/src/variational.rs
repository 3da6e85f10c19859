//! Backward-factorized variational laws, the KL chain rule, the ELBO and
//! the per-sequence loss `m`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{filter_forward, InferenceResult};
use crate::math::{exp, kl, ln, softmax_chart};
use crate::optim::{projected_gradient, Objective, OptimOptions};
use crate::ssm::{build_finite_ssm, checked_count, FiniteSSM, ModelFamily, ModelShape, ParamBox};

/// Which observations a kernel or terminal law may look at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// Kernel at step `t` keyed by `y_{0:t-1}`, terminal law by `y_{0:T}`.
    FullPrefix,
    /// Kernel at step `t` keyed by the `w` observations `y_{t-w:t-1}`,
    /// terminal law by `y_{T-w+1:T}`. `Window(0)` ignores the data.
    Window(usize),
    /// One kernel for every step and one terminal law.
    Shared,
    /// `φ` is a parameter of the tabular model chart and `Q_φ` is the exact
    /// backward decomposition of that model: filter-state amortization.
    ModelBackward,
}

/// Tabular softmax family for a fixed horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalFamily {
    pub states: usize,
    pub symbols: usize,
    pub horizon: usize,
    pub mode: ContextMode,
    /// Every entry is at least `floor`; zero disables the floor.
    pub floor: f64,
    pub bounds: ParamBox,
    kernel_starts: Vec<usize>,
    kernel_blocks: usize,
    terminal_blocks: usize,
}

impl VariationalFamily {
    pub fn new(
        states: usize,
        symbols: usize,
        horizon: usize,
        mode: ContextMode,
        floor: f64,
        radius: f64,
        cap: usize,
    ) -> Result<Self> {
        let mut fam = Self::layout(states, symbols, horizon, mode, floor, cap)?;
        fam.bounds = ParamBox::symmetric(fam.dim(), radius);
        Ok(fam)
    }

    /// Same layout with an explicit parameter box.
    pub fn with_bounds(
        states: usize,
        symbols: usize,
        horizon: usize,
        mode: ContextMode,
        floor: f64,
        bounds: ParamBox,
        cap: usize,
    ) -> Result<Self> {
        let mut fam = Self::layout(states, symbols, horizon, mode, floor, cap)?;
        if bounds.dim() != fam.dim() {
            return Err(Error::ParameterShape {
                expected: fam.dim(),
                found: bounds.dim(),
            });
        }
        fam.bounds = bounds;
        Ok(fam)
    }

    fn layout(
        states: usize,
        symbols: usize,
        horizon: usize,
        mode: ContextMode,
        floor: f64,
        cap: usize,
    ) -> Result<Self> {
        if states == 0 || symbols == 0 {
            return Err(Error::InvalidCount("K and V must be at least 1"));
        }
        if !(floor >= 0.0 && floor * (states as f64) < 1.0) {
            return Err(Error::InvalidArgument(
                "floor must satisfy 0 <= K * floor < 1".into(),
            ));
        }
        let mut kernel_starts = vec![0usize; horizon + 2];
        let mut acc = 0usize;
        for t in 1..=horizon {
            kernel_starts[t] = acc;
            let n = match mode {
                ContextMode::FullPrefix => checked_count(symbols, t, cap)?,
                ContextMode::Window(w) => checked_count(symbols, w.min(t), cap)?,
                ContextMode::Shared => usize::from(t == 1),
                ContextMode::ModelBackward => 0,
            };
            acc += n;
        }
        kernel_starts[horizon + 1] = acc;
        let terminal_blocks = match mode {
            ContextMode::FullPrefix => checked_count(symbols, horizon + 1, cap)?,
            ContextMode::Window(w) => checked_count(symbols, w.min(horizon + 1), cap)?,
            ContextMode::Shared => 1,
            ContextMode::ModelBackward => 0,
        };
        Ok(Self {
            states,
            symbols,
            horizon,
            mode,
            floor,
            bounds: ParamBox::symmetric(0, 0.0),
            kernel_starts,
            kernel_blocks: acc,
            terminal_blocks,
        })
    }

    pub fn dim(&self) -> usize {
        let k = self.states;
        if self.mode == ContextMode::ModelBackward {
            return ModelShape {
                states: k,
                symbols: self.symbols,
            }
            .param_dim();
        }
        self.kernel_blocks * k * (k - 1) + self.terminal_blocks * (k - 1)
    }

    pub fn kernel_blocks(&self) -> usize {
        self.kernel_blocks
    }

    pub fn terminal_blocks(&self) -> usize {
        self.terminal_blocks
    }

    /// Whether each table row has its own block of softmax logits.
    pub fn is_tabular(&self) -> bool {
        self.mode != ContextMode::ModelBackward
    }

    fn window_code(&self, y: &[usize], from: usize, to: usize) -> usize {
        y[from..to]
            .iter()
            .rev()
            .fold(0usize, |acc, &s| acc * self.symbols + s)
    }

    /// Block index of the kernel `Q_{t-1|t}` for sequence `y`.
    pub fn kernel_block(&self, t: usize, y: &[usize]) -> usize {
        debug_assert!(1 <= t && t <= self.horizon);
        match self.mode {
            ContextMode::FullPrefix => self.kernel_starts[t] + self.window_code(y, 0, t),
            ContextMode::Window(w) => self.kernel_starts[t] + self.window_code(y, t - w.min(t), t),
            ContextMode::Shared | ContextMode::ModelBackward => 0,
        }
    }

    pub fn terminal_block(&self, y: &[usize]) -> usize {
        let len = self.horizon + 1;
        match self.mode {
            ContextMode::FullPrefix => self.window_code(y, 0, len),
            ContextMode::Window(w) => self.window_code(y, len - w.min(len), len),
            ContextMode::Shared | ContextMode::ModelBackward => 0,
        }
    }

    /// Offset in `phi` of row `x_t` of the kernel at step `t`.
    pub fn kernel_row_offset(&self, t: usize, y: &[usize], x_t: usize) -> usize {
        let k = self.states;
        self.kernel_block(t, y) * k * (k - 1) + x_t * (k - 1)
    }

    pub fn terminal_offset(&self, y: &[usize]) -> usize {
        let k = self.states;
        self.kernel_blocks * k * (k - 1) + self.terminal_block(y) * (k - 1)
    }

    /// Mass left to the softmax part once the floor is set aside.
    pub fn scale(&self) -> f64 {
        1.0 - self.states as f64 * self.floor
    }

    /// Floored softmax row; returns the raw softmax in `soft` as well.
    pub fn row(&self, logits: &[f64], soft: &mut [f64], out: &mut [f64]) {
        softmax_chart(logits, soft);
        let s = self.scale();
        for (o, &p) in out.iter_mut().zip(soft.iter()) {
            *o = self.floor + s * p;
        }
    }

    /// Resolve the tables used by sequence `y`.
    pub fn law(&self, phi: &[f64], y: &[usize]) -> Result<VariationalLaw> {
        if phi.len() != self.dim() {
            return Err(Error::ParameterShape {
                expected: self.dim(),
                found: phi.len(),
            });
        }
        if y.len() != self.horizon + 1 {
            return Err(Error::LengthMismatch {
                left: y.len(),
                right: self.horizon + 1,
            });
        }
        let k = self.states;
        if !self.is_tabular() {
            return self.model_backward_law(phi, y);
        }
        let mut soft = vec![0.0; k];
        let mut terminal = vec![0.0; k];
        let o = self.terminal_offset(y);
        self.row(&phi[o..o + k - 1], &mut soft, &mut terminal);
        let mut kernels = Vec::with_capacity(self.horizon);
        for t in 1..=self.horizon {
            let mut kernel = vec![0.0; k * k];
            for xt in 0..k {
                let o = self.kernel_row_offset(t, y, xt);
                self.row(
                    &phi[o..o + k - 1],
                    &mut soft,
                    &mut kernel[xt * k..(xt + 1) * k],
                );
            }
            kernels.push(kernel);
        }
        Ok(VariationalLaw {
            states: k,
            terminal,
            kernels,
        })
    }
}

impl VariationalFamily {
    fn model_backward_law(&self, phi: &[f64], y: &[usize]) -> Result<VariationalLaw> {
        let model = build_finite_ssm(phi, self.states, self.symbols)?;
        let mut law = VariationalLaw::from_inference(&filter_forward(&model, y)?);
        let s = self.scale();
        for v in law
            .terminal
            .iter_mut()
            .chain(law.kernels.iter_mut().flatten())
        {
            *v = self.floor + s * *v;
        }
        Ok(law)
    }
}

/// A family together with a parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardVariational {
    pub family: VariationalFamily,
    pub phi: Vec<f64>,
}

impl BackwardVariational {
    pub fn new(family: VariationalFamily, phi: Vec<f64>) -> Result<Self> {
        if phi.len() != family.dim() {
            return Err(Error::ParameterShape {
                expected: family.dim(),
                found: phi.len(),
            });
        }
        Ok(Self { family, phi })
    }

    pub fn terminal(&self, y: &[usize]) -> Result<Vec<f64>> {
        Ok(self.family.law(&self.phi, y)?.terminal)
    }

    pub fn kernel(&self, t: usize, y: &[usize]) -> Result<Vec<f64>> {
        Ok(self.family.law(&self.phi, y)?.kernels[t - 1].clone())
    }

    pub fn law(&self, y: &[usize]) -> Result<VariationalLaw> {
        self.family.law(&self.phi, y)
    }
}

/// Variational tables for one sequence: `Q_T` and `Q_{t-1|t}`, `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLaw {
    pub states: usize,
    pub terminal: Vec<f64>,
    /// `kernels[t-1][x_t * K + x_{t-1}]`.
    pub kernels: Vec<Vec<f64>>,
}

impl VariationalLaw {
    /// The exact backward decomposition of the smoothing law.
    pub fn from_inference(inf: &InferenceResult) -> Self {
        Self {
            states: inf.states,
            terminal: inf.filters[inf.horizon()].clone(),
            kernels: inf.backward.clone(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel_row(&self, t: usize, x_t: usize) -> &[f64] {
        let k = self.states;
        &self.kernels[t - 1][x_t * k..(x_t + 1) * k]
    }

    /// Marginal laws of `X_t` under `Q`, `t = 0..=T`.
    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let k = self.states;
        let big_t = self.horizon();
        let mut out = vec![Vec::new(); big_t + 1];
        out[big_t] = self.terminal.clone();
        for t in (1..=big_t).rev() {
            let mut prev = vec![0.0; k];
            for xt in 0..k {
                let w = out[t][xt];
                for (xp, p) in prev.iter_mut().enumerate() {
                    *p += w * self.kernel_row(t, xt)[xp];
                }
            }
            out[t - 1] = prev;
        }
        out
    }

    pub fn path_prob(&self, x: &[usize]) -> f64 {
        let big_t = self.horizon();
        let mut p = self.terminal[x[big_t]];
        for t in (1..=big_t).rev() {
            p *= self.kernel_row(t, x[t])[x[t - 1]];
        }
        p
    }
}

/// Chain-rule decomposition of `KL(Q || Φ_{0:T|T})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlChain {
    pub total: f64,
    pub terminal: f64,
    /// `steps[t-1] = E_{Q_t}[KL(Q_{t-1|t}(X_t, ·) || B_{t-1|t}(X_t, ·))]`.
    pub steps: Vec<f64>,
    pub infinite: bool,
}

pub fn kl_backward_chain(q: &VariationalLaw, inf: &InferenceResult) -> Result<KlChain> {
    if q.states != inf.states || q.horizon() != inf.horizon() {
        return Err(Error::LengthMismatch {
            left: q.horizon(),
            right: inf.horizon(),
        });
    }
    let big_t = q.horizon();
    let marg = q.marginals();
    let terminal = kl(&q.terminal, &inf.filters[big_t]);
    let mut steps = vec![0.0; big_t];
    for t in 1..=big_t {
        let mut s = 0.0;
        for xt in 0..q.states {
            let w = marg[t][xt];
            if w > 0.0 {
                s += w * kl(q.kernel_row(t, xt), inf.backward_row(t, xt));
            }
        }
        steps[t - 1] = s;
    }
    let total = terminal + steps.iter().sum::<f64>();
    Ok(KlChain {
        total,
        terminal,
        steps,
        infinite: !total.is_finite(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    /// `m = loglik_gap + kl`.
    pub loss: f64,
    /// `log p_D(y) - ℓ_T(θ)`.
    pub loglik_gap: f64,
    pub kl: f64,
    pub elbo: f64,
    pub loglik: f64,
}

/// ELBO through `ℓ_T - KL`. `loss` and `loglik_gap` are measured against the
/// model's own likelihood, so `loglik_gap = 0` and `loss = kl`.
pub fn elbo(model: &FiniteSSM, q: &VariationalLaw, y: &[usize]) -> Result<LossValue> {
    let inf = filter_forward(model, y)?;
    loss_from_inference(&inf, q, inf.loglik)
}

pub fn loss_m(
    model: &FiniteSSM,
    q: &VariationalLaw,
    y: &[usize],
    logp_data: f64,
) -> Result<LossValue> {
    let inf = filter_forward(model, y)?;
    loss_from_inference(&inf, q, logp_data)
}

pub fn loss_from_inference(
    inf: &InferenceResult,
    q: &VariationalLaw,
    logp_data: f64,
) -> Result<LossValue> {
    let chain = kl_backward_chain(q, inf)?;
    let loglik_gap = logp_data - inf.loglik;
    Ok(LossValue {
        loss: loglik_gap + chain.total,
        loglik_gap,
        kl: chain.total,
        elbo: inf.loglik - chain.total,
        loglik: inf.loglik,
    })
}

/// One distinct sequence with its weight and data log-density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSequence {
    pub y: Vec<usize>,
    pub weight: f64,
    pub logp_data: f64,
}

/// Group a sample by distinct sequence; weights are frequencies.
pub fn group_sequences<F: Fn(&[usize]) -> f64>(
    sequences: &[Vec<usize>],
    logp_data: F,
) -> Vec<WeightedSequence> {
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    for s in sequences {
        *counts.entry(s.as_slice()).or_insert(0) += 1;
    }
    let n = sequences.len() as f64;
    counts
        .into_iter()
        .map(|(y, c)| WeightedSequence {
            y: y.to_vec(),
            weight: c as f64 / n,
            logp_data: logp_data(y),
        })
        .collect()
}

/// `n^{-1} Σ_i m(θ, φ, Y^i)` over a grouped sample.
pub fn empirical_loss(
    model: &FiniteSSM,
    q: &BackwardVariational,
    data: &[WeightedSequence],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidCount("dataset is empty"));
    }
    let mut total = 0.0;
    for item in data {
        let law = q.law(&item.y)?;
        total += item.weight * loss_m(model, &law, &item.y, item.logp_data)?.loss;
    }
    Ok(total)
}

/// Weighted loss over a model family and a variational family, with
/// analytic gradients.
pub struct LossObjective<'a> {
    pub model_family: &'a ModelFamily,
    pub q_family: &'a VariationalFamily,
    pub data: &'a [WeightedSequence],
}

impl LossObjective<'_> {
    pub fn theta_dim(&self) -> usize {
        self.model_family.dim()
    }

    pub fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], &'x [f64]) {
        x.split_at(self.theta_dim())
    }

    /// Loss at `(θ, φ)` with optional gradient.
    pub fn evaluate(&self, theta: &[f64], phi: &[f64], grad: Option<&mut [f64]>) -> f64 {
        match self.try_evaluate(theta, phi, grad) {
            Ok(v) => v,
            Err(_) => f64::INFINITY,
        }
    }

    pub fn try_evaluate(
        &self,
        theta: &[f64],
        phi: &[f64],
        mut grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let model = self.model_family.model(theta)?;
        let fam = self.q_family;
        let k = model.states();
        let v = model.symbols();
        let dt = self.theta_dim();
        if let Some(g) = grad.as_deref_mut() {
            g.fill(0.0);
        }
        let want_grad = grad.is_some();
        let mut c_trans = vec![0.0; k * k];
        let mut c_emit = vec![0.0; k * v];
        let mut c_init = vec![0.0; k];
        let log_m: Vec<f64> = model.transition().iter().map(|&p| ln(p)).collect();
        let log_g: Vec<f64> = model.emission().iter().map(|&p| ln(p)).collect();
        let log_z: Vec<f64> = model.initial().iter().map(|&p| ln(p)).collect();
        let scale = fam.scale();
        let mut total = 0.0;
        let mut work = SequenceWork::new(k, fam.horizon);
        for item in self.data {
            let y = &item.y;
            let elbo = work.run(fam, phi, y, &log_m, &log_g, &log_z)?;
            total += item.weight * (item.logp_data - elbo);
            if !want_grad {
                continue;
            }
            let w = item.weight;
            let g = grad.as_deref_mut().unwrap();
            let big_t = fam.horizon;
            // φ: terminal row then kernel rows.
            if !fam.is_tabular() {
                // Filled in by central differences below.
            } else {
                let o = dt + fam.terminal_offset(y);
                accumulate_row_gradient(
                    &mut g[o..o + k - 1],
                    &work.soft_t,
                    &work.a_t,
                    &work.q_t,
                    scale,
                    -w,
                );
                for t in 1..=big_t {
                    for xt in 0..k {
                        let mt = work.marg[t][xt];
                        if mt == 0.0 {
                            continue;
                        }
                        let o = dt + fam.kernel_row_offset(t, y, xt);
                        let r = (t - 1) * k * k + xt * k;
                        accumulate_row_gradient(
                            &mut g[o..o + k - 1],
                            &work.soft[r..r + k],
                            &work.f[r..r + k],
                            &work.q[r..r + k],
                            scale,
                            -w * mt,
                        );
                    }
                }
            }
            // θ: expected counts under Q.
            for (x, c) in c_init.iter_mut().enumerate() {
                *c += w * work.marg[0][x];
            }
            for t in 0..=big_t {
                for x in 0..k {
                    c_emit[x * v + y[t]] += w * work.marg[t][x];
                }
            }
            for t in 1..=big_t {
                for xt in 0..k {
                    let mt = work.marg[t][xt];
                    for xp in 0..k {
                        c_trans[xp * k + xt] += w * mt * work.q[(t - 1) * k * k + xt * k + xp];
                    }
                }
            }
        }
        if let Some(g) = grad {
            let shape = self.model_family.shape;
            for r in 0..k {
                let o = shape.transition_offset(r);
                count_gradient(
                    &mut g[o..o + k - 1],
                    &c_trans[r * k..(r + 1) * k],
                    &model.transition()[r * k..(r + 1) * k],
                );
                let o = shape.emission_offset(r);
                count_gradient(
                    &mut g[o..o + v - 1],
                    &c_emit[r * v..(r + 1) * v],
                    &model.emission()[r * v..(r + 1) * v],
                );
            }
            let o = shape.initial_offset();
            count_gradient(&mut g[o..o + k - 1], &c_init, model.initial());
            if !fam.is_tabular() {
                let f = |p: &[f64]| self.evaluate(theta, p, None);
                crate::optim::central_difference(f, phi, 1e-6, &mut g[dt..]);
            }
        }
        Ok(total)
    }
}

/// Adds `coef * s * p_k [(a_k - ln q_k) - Σ_j p_j (a_j - ln q_j)]` for the free logits.
fn accumulate_row_gradient(
    out: &mut [f64],
    soft: &[f64],
    a: &[f64],
    q: &[f64],
    scale: f64,
    coef: f64,
) {
    let mean: f64 = soft
        .iter()
        .zip(a)
        .zip(q)
        .map(|((p, a), q)| p * (a - ln(*q)))
        .sum();
    for (kk, o) in out.iter_mut().enumerate() {
        let j = kk + 1;
        *o += coef * scale * soft[j] * ((a[j] - ln(q[j])) - mean);
    }
}

/// Gradient of `-Σ_j c_j ln p_j` in the free logits: `-(c_k - (Σc) p_k)`.
fn count_gradient(out: &mut [f64], counts: &[f64], probs: &[f64]) {
    let total: f64 = counts.iter().sum();
    for (kk, o) in out.iter_mut().enumerate() {
        let j = kk + 1;
        *o = -(counts[j] - total * probs[j]);
    }
}

/// Scratch space for the backward-in-time ELBO recursion of one sequence.
struct SequenceWork {
    k: usize,
    /// Kernel rows for `t = 1..=T`, flattened `[(t-1)][x_t][x_{t-1}]`.
    q: Vec<f64>,
    soft: Vec<f64>,
    /// `F_t(x_t, x') = ln m(x', x_t) + ln g^{y_{t-1}}(x') + [t=1] ln ζ(x') + V_{t-1}(x')`.
    f: Vec<f64>,
    q_t: Vec<f64>,
    soft_t: Vec<f64>,
    a_t: Vec<f64>,
    marg: Vec<Vec<f64>>,
}

impl SequenceWork {
    fn new(k: usize, horizon: usize) -> Self {
        Self {
            k,
            q: vec![0.0; horizon * k * k],
            soft: vec![0.0; horizon * k * k],
            f: vec![0.0; horizon * k * k],
            q_t: vec![0.0; k],
            soft_t: vec![0.0; k],
            a_t: vec![0.0; k],
            marg: vec![vec![0.0; k]; horizon + 1],
        }
    }

    /// Returns the ELBO and fills tables, `F` values and `Q` marginals.
    fn run(
        &mut self,
        fam: &VariationalFamily,
        phi: &[f64],
        y: &[usize],
        log_m: &[f64],
        log_g: &[f64],
        log_z: &[f64],
    ) -> Result<f64> {
        let k = self.k;
        let v = fam.symbols;
        let big_t = fam.horizon;
        if y.len() != big_t + 1 {
            return Err(Error::LengthMismatch {
                left: y.len(),
                right: big_t + 1,
            });
        }
        let tabular = fam.is_tabular();
        if !tabular {
            let law = fam.law(phi, y)?;
            for (t, kern) in law.kernels.iter().enumerate() {
                self.q[t * k * k..(t + 1) * k * k].copy_from_slice(kern);
            }
            self.q_t.copy_from_slice(&law.terminal);
        }
        let mut value = vec![0.0; k];
        let mut next = vec![0.0; k];
        for t in 1..=big_t {
            for xt in 0..k {
                let r = (t - 1) * k * k + xt * k;
                if tabular {
                    let o = fam.kernel_row_offset(t, y, xt);
                    let (soft, q) = (&mut self.soft[r..r + k], &mut self.q[r..r + k]);
                    fam.row(&phi[o..o + k - 1], soft, q);
                }
                let mut acc = 0.0;
                for xp in 0..k {
                    let mut fv = log_m[xp * k + xt] + log_g[xp * v + y[t - 1]] + value[xp];
                    if t == 1 {
                        fv += log_z[xp];
                    }
                    self.f[r + xp] = fv;
                    let qv = self.q[r + xp];
                    if qv > 0.0 {
                        acc += qv * (fv - ln(qv));
                    }
                }
                next[xt] = acc;
            }
            core::mem::swap(&mut value, &mut next);
        }
        if tabular {
            let o = fam.terminal_offset(y);
            fam.row(&phi[o..o + k - 1], &mut self.soft_t, &mut self.q_t);
        }
        let mut elbo = 0.0;
        for x in 0..k {
            let mut a = log_g[x * v + y[big_t]] + value[x];
            if big_t == 0 {
                a += log_z[x];
            }
            self.a_t[x] = a;
            let qv = self.q_t[x];
            if qv > 0.0 {
                elbo += qv * (a - ln(qv));
            }
        }
        self.marg[big_t].copy_from_slice(&self.q_t);
        for t in (1..=big_t).rev() {
            let mut prev = vec![0.0; k];
            for xt in 0..k {
                let w = self.marg[t][xt];
                let r = (t - 1) * k * k + xt * k;
                for (xp, p) in prev.iter_mut().enumerate() {
                    *p += w * self.q[r + xp];
                }
            }
            self.marg[t - 1] = prev;
        }
        Ok(elbo)
    }
}

impl Objective for LossObjective<'_> {
    fn dim(&self) -> usize {
        self.theta_dim() + self.q_family.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let (theta, phi) = self.split(x);
        self.evaluate(theta, phi, None)
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (theta, phi) = self.split(x);
        let v = self.evaluate(theta, phi, Some(grad));
        if !v.is_finite() {
            grad.fill(0.0);
        }
        v
    }
}

/// Result of the per-row minimax fit of the backward kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestApproximation {
    pub phi: Vec<f64>,
    /// `max` over all `(y, t, x_t)` terms at `phi`.
    pub epsilon_hat: f64,
    /// Weak-duality lower bound on the minimax value.
    pub epsilon_lower: f64,
    pub converged: bool,
}

/// Finds `φ` minimizing the largest per-step KL
/// `KL(Q_{t-1|t}(x_t,·) || B_{t-1|t}(x_t,·))` and `KL(Q_T || Φ_T)` over the
/// sequences in `ys`.
///
/// Every term depends on a single softmax row of `φ`, so the problem splits
/// into independent minimax problems, one per row. Each row is solved with a
/// smoothed maximum; the softmax weights of the final iterate give a
/// lower bound through the closed-form minimizer of a weighted sum of KL
/// terms, the normalized geometric mixture.
pub fn best_backward_approximation(
    model: &FiniteSSM,
    family: &VariationalFamily,
    ys: &[Vec<usize>],
) -> Result<BestApproximation> {
    let k = family.states;
    if !family.is_tabular() {
        return model_backward_approximation(model, family, ys);
    }
    let mut rows: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for y in ys {
        let inf = match filter_forward(model, y) {
            Ok(r) => r,
            Err(Error::ImpossibleObservation { .. }) => continue,
            Err(e) => return Err(e),
        };
        rows.entry(family.terminal_offset(y))
            .or_default()
            .push(inf.filters[family.horizon].clone());
        for t in 1..=family.horizon {
            for xt in 0..k {
                rows.entry(family.kernel_row_offset(t, y, xt))
                    .or_default()
                    .push(inf.backward_row(t, xt).to_vec());
            }
        }
    }
    let mut phi = family.bounds.center();
    let mut eps_hat = 0.0f64;
    let mut eps_lower = 0.0f64;
    let mut converged = true;
    for (offset, targets) in rows {
        let mut uniq: Vec<Vec<f64>> = Vec::new();
        for t in targets {
            if !uniq.iter().any(|u| u == &t) {
                uniq.push(t);
            }
        }
        let lo = &family.bounds.lower[offset..offset + k - 1];
        let hi = &family.bounds.upper[offset..offset + k - 1];
        let fit = minimax_row(family, &uniq, lo, hi);
        phi[offset..offset + k - 1].copy_from_slice(&fit.logits);
        eps_hat = eps_hat.max(fit.upper);
        eps_lower = eps_lower.max(fit.lower);
        converged &= fit.converged;
    }
    Ok(BestApproximation {
        phi,
        epsilon_hat: eps_hat,
        epsilon_lower: eps_lower,
        converged,
    })
}

/// For a model-backward family the data model's own parameter, projected on
/// the box, is used; the lower bound is the trivial 0.
fn model_backward_approximation(
    model: &FiniteSSM,
    family: &VariationalFamily,
    ys: &[Vec<usize>],
) -> Result<BestApproximation> {
    let mut phi = match model.theta() {
        Some(t) => t.to_vec(),
        None => family.bounds.center(),
    };
    family.bounds.project(&mut phi);
    let mut eps_hat = 0.0f64;
    for y in ys {
        let inf = match filter_forward(model, y) {
            Ok(r) => r,
            Err(Error::ImpossibleObservation { .. }) => continue,
            Err(e) => return Err(e),
        };
        let q = family.law(&phi, y)?;
        eps_hat = eps_hat.max(kl(&q.terminal, &inf.filters[family.horizon]));
        for t in 1..=family.horizon {
            for xt in 0..family.states {
                eps_hat = eps_hat.max(kl(q.kernel_row(t, xt), inf.backward_row(t, xt)));
            }
        }
    }
    Ok(BestApproximation {
        phi,
        epsilon_hat: eps_hat,
        epsilon_lower: 0.0,
        converged: true,
    })
}

struct RowFit {
    logits: Vec<f64>,
    upper: f64,
    lower: f64,
    converged: bool,
}

struct SmoothMax<'a> {
    family: &'a VariationalFamily,
    targets: &'a [Vec<f64>],
    beta: f64,
}

impl SmoothMax<'_> {
    fn terms(&self, z: &[f64], soft: &mut [f64], q: &mut [f64]) -> Vec<f64> {
        self.family.row(z, soft, q);
        self.targets.iter().map(|b| kl(q, b)).collect()
    }

    fn weights(&self, terms: &[f64]) -> Vec<f64> {
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = terms.iter().map(|&f| exp(self.beta * (f - m))).collect();
        let s: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= s;
        }
        w
    }
}

impl Objective for SmoothMax<'_> {
    fn dim(&self) -> usize {
        self.family.states - 1
    }

    fn value(&self, z: &[f64]) -> f64 {
        let k = self.family.states;
        let (mut soft, mut q) = (vec![0.0; k], vec![0.0; k]);
        let terms = self.terms(z, &mut soft, &mut q);
        let scaled: Vec<f64> = terms.iter().map(|f| self.beta * f).collect();
        crate::math::log_sum_exp(&scaled) / self.beta
    }

    fn value_and_gradient(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.family.states;
        let (mut soft, mut q) = (vec![0.0; k], vec![0.0; k]);
        let terms = self.terms(z, &mut soft, &mut q);
        let w = self.weights(&terms);
        grad.fill(0.0);
        let s = self.family.scale();
        for (wi, b) in w.iter().zip(self.targets) {
            // d KL(q||b) / d z_j = s p_j [ln(q_j/b_j) - Σ_i p_i ln(q_i/b_i)].
            let lr: Vec<f64> = q.iter().zip(b).map(|(&qi, &bi)| ln(qi / bi)).collect();
            let mean: f64 = soft.iter().zip(&lr).map(|(p, l)| p * l).sum();
            for (jj, g) in grad.iter_mut().enumerate() {
                *g += wi * s * soft[jj + 1] * (lr[jj + 1] - mean);
            }
        }
        let scaled: Vec<f64> = terms.iter().map(|f| self.beta * f).collect();
        crate::math::log_sum_exp(&scaled) / self.beta
    }
}

/// `min_q Σ_i w_i KL(q || b_i) = -ln Σ_x Π_i b_i(x)^{w_i}`.
fn weighted_kl_floor(targets: &[Vec<f64>], w: &[f64]) -> f64 {
    let k = targets[0].len();
    let mut z = 0.0;
    for x in 0..k {
        let mut l = 0.0;
        let mut zero = false;
        for (b, &wi) in targets.iter().zip(w) {
            if wi == 0.0 {
                continue;
            }
            if b[x] <= 0.0 {
                zero = true;
                break;
            }
            l += wi * ln(b[x]);
        }
        if !zero {
            z += exp(l);
        }
    }
    if z > 0.0 {
        -ln(z)
    } else {
        f64::INFINITY
    }
}

fn minimax_row(family: &VariationalFamily, targets: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> RowFit {
    let k = family.states;
    if k == 1 {
        return RowFit {
            logits: Vec::new(),
            upper: 0.0,
            lower: 0.0,
            converged: true,
        };
    }
    let bounds = ParamBox {
        lower: lo.to_vec(),
        upper: hi.to_vec(),
    };
    // Start from the geometric mixture with equal weights.
    let w0 = vec![1.0 / targets.len() as f64; targets.len()];
    let mut start = geometric_mixture_logits(targets, &w0);
    bounds.project(&mut start);
    let mut z = start;
    let mut converged = true;
    let (mut soft, mut q) = (vec![0.0; k], vec![0.0; k]);
    let mut lower = 0.0f64;
    for beta in [1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8] {
        let obj = SmoothMax {
            family,
            targets,
            beta,
        };
        let opts = OptimOptions {
            max_iter: 500,
            tol: 1e-15,
            gtol: 1e-13,
            ..OptimOptions::default()
        };
        let out = projected_gradient(&obj, &bounds, &z, &opts);
        z = out.x;
        let terms = obj.terms(&z, &mut soft, &mut q);
        let w = obj.weights(&terms);
        lower = lower.max(weighted_kl_floor(targets, &w));
        converged = out.converged;
    }
    family.row(&z, &mut soft, &mut q);
    let upper = targets.iter().map(|b| kl(&q, b)).fold(0.0, f64::max);
    RowFit {
        logits: z,
        upper,
        lower: lower.min(upper),
        converged,
    }
}

fn geometric_mixture_logits(targets: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let k = targets[0].len();
    let floor = 1e-300f64;
    let logq: Vec<f64> = (0..k)
        .map(|x| {
            targets
                .iter()
                .zip(w)
                .map(|(b, wi)| wi * ln(b[x].max(floor)))
                .sum()
        })
        .collect();
    (1..k)
        .map(|x| (logq[x] - logq[0]).clamp(-700.0, 700.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::filter_forward;
    use crate::rng::rng_from_seed;
    use crate::ssm::{build_finite_ssm, ModelShape};

    fn random_model(k: usize, v: usize, seed: u64) -> FiniteSSM {
        let shape = ModelShape::new(k, v).unwrap();
        let mut rng = rng_from_seed(seed);
        build_finite_ssm(
            &ParamBox::symmetric(shape.param_dim(), 2.0).sample(&mut rng),
            k,
            v,
        )
        .unwrap()
    }

    #[test]
    fn layout_counts() {
        let f =
            VariationalFamily::new(2, 2, 3, ContextMode::FullPrefix, 0.0, 10.0, 1 << 20).unwrap();
        assert_eq!(f.kernel_blocks(), 2 + 4 + 8);
        assert_eq!(f.terminal_blocks(), 16);
        let w =
            VariationalFamily::new(2, 3, 3, ContextMode::Window(1), 0.0, 10.0, 1 << 20).unwrap();
        assert_eq!(w.kernel_blocks(), 9);
        assert_eq!(w.terminal_blocks(), 3);
        let w0 =
            VariationalFamily::new(3, 3, 4, ContextMode::Window(0), 0.0, 10.0, 1 << 20).unwrap();
        assert_eq!(w0.kernel_blocks(), 4);
        assert_eq!(w0.terminal_blocks(), 1);
        assert_eq!(w0.dim(), 4 * 6 + 2);
        let s = VariationalFamily::new(2, 2, 5, ContextMode::Shared, 0.0, 10.0, 1 << 20).unwrap();
        assert_eq!(s.dim(), 2 + 1);
    }

    #[test]
    fn window_keys_use_preceding_observations() {
        let f =
            VariationalFamily::new(2, 2, 3, ContextMode::Window(1), 0.0, 10.0, 1 << 20).unwrap();
        assert_eq!(
            f.kernel_block(2, &[0, 1, 0, 0]),
            f.kernel_block(2, &[1, 1, 1, 1])
        );
        assert_ne!(
            f.kernel_block(2, &[0, 1, 0, 0]),
            f.kernel_block(2, &[0, 0, 0, 0])
        );
        assert_eq!(
            f.terminal_block(&[0, 0, 0, 1]),
            f.terminal_block(&[1, 1, 1, 1])
        );
    }

    #[test]
    fn exact_decomposition_has_zero_kl() {
        let m = random_model(3, 2, 1);
        let y = [0, 1, 1, 0, 1];
        let inf = filter_forward(&m, &y).unwrap();
        let q = VariationalLaw::from_inference(&inf);
        let chain = kl_backward_chain(&q, &inf).unwrap();
        assert!(chain.total.abs() < 1e-14);
        assert!(chain.steps.iter().all(|s| s.abs() < 1e-14));
        let e = elbo(&m, &q, &y).unwrap();
        assert!((e.elbo - e.loglik).abs() < 1e-12);
    }

    #[test]
    fn horizon_zero_kl_is_terminal_kl() {
        let m = random_model(2, 3, 2);
        let inf = filter_forward(&m, &[2]).unwrap();
        let q = VariationalLaw {
            states: 2,
            terminal: vec![0.3, 0.7],
            kernels: vec![],
        };
        let chain = kl_backward_chain(&q, &inf).unwrap();
        assert_eq!(chain.total, kl(&[0.3, 0.7], &inf.filters[0]));
    }

    #[test]
    fn single_state_model_elbo_is_loglik() {
        let m = build_finite_ssm(&[0.4, -0.3], 1, 3).unwrap();
        let fam = VariationalFamily::new(1, 3, 2, ContextMode::Window(1), 0.0, 10.0, 1000).unwrap();
        let y = [0, 2, 1];
        let q = fam.law(&[], &y).unwrap();
        let e = elbo(&m, &q, &y).unwrap();
        let direct: f64 = y.iter().map(|&s| ln(m.emit(0, s))).sum();
        assert!((e.loglik - direct).abs() < 1e-12);
        assert!((e.elbo - direct).abs() < 1e-12);
        assert_eq!(e.kl, 0.0);
    }

    #[test]
    fn zero_denominator_gives_flagged_infinity() {
        let m =
            FiniteSSM::from_tables(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.5; 4], vec![1.0, 0.0])
                .unwrap();
        let y = [0, 1];
        let inf = filter_forward(&m, &y).unwrap();
        let q = VariationalLaw {
            states: 2,
            terminal: vec![0.5, 0.5],
            kernels: vec![vec![0.5; 4]],
        };
        let chain = kl_backward_chain(&q, &inf).unwrap();
        assert!(chain.infinite);
    }

    #[test]
    fn loss_identities_at_the_truth() {
        let m = random_model(2, 2, 3);
        let y = [1, 0, 1];
        let inf = filter_forward(&m, &y).unwrap();
        let exact = VariationalLaw::from_inference(&inf);
        let v = loss_m(&m, &exact, &y, inf.loglik).unwrap();
        assert!(v.loss.abs() < 1e-12);
        let q = VariationalLaw {
            states: 2,
            terminal: vec![0.2, 0.8],
            kernels: vec![vec![0.6, 0.4, 0.1, 0.9]; 2],
        };
        let v = loss_m(&m, &q, &y, inf.loglik).unwrap();
        assert!((v.loss - v.kl).abs() < 1e-12 && v.kl > 0.0);
    }

    #[test]
    fn dp_elbo_matches_chain_elbo() {
        let shape = ModelShape::new(3, 2).unwrap();
        let mf = ModelFamily::clipped(shape, 10.0);
        let qf = VariationalFamily::new(3, 2, 4, ContextMode::Window(1), 0.01, 10.0, 1000).unwrap();
        let mut rng = rng_from_seed(8);
        let theta = ParamBox::symmetric(mf.dim(), 2.0).sample(&mut rng);
        let phi = ParamBox::symmetric(qf.dim(), 2.0).sample(&mut rng);
        let y = vec![0, 1, 1, 0, 1];
        let data = [WeightedSequence {
            y: y.clone(),
            weight: 1.0,
            logp_data: -1.5,
        }];
        let obj = LossObjective {
            model_family: &mf,
            q_family: &qf,
            data: &data,
        };
        let dp = obj.evaluate(&theta, &phi, None);
        let model = mf.model(&theta).unwrap();
        let law = qf.law(&phi, &y).unwrap();
        let direct = loss_m(&model, &law, &y, -1.5).unwrap().loss;
        assert!((dp - direct).abs() < 1e-10, "{dp} vs {direct}");
    }

    #[test]
    fn identical_sequences_collapse_to_one() {
        let m = random_model(2, 2, 4);
        let fam = VariationalFamily::new(2, 2, 2, ContextMode::Shared, 0.0, 10.0, 100).unwrap();
        let q = BackwardVariational::new(fam, vec![0.3, -0.2, 0.5]).unwrap();
        let seqs = vec![vec![0, 1, 1]; 5];
        let data = group_sequences(&seqs, |_| -2.0);
        assert_eq!(data.len(), 1);
        let one = loss_m(&m, &q.law(&seqs[0]).unwrap(), &seqs[0], -2.0)
            .unwrap()
            .loss;
        assert!((empirical_loss(&m, &q, &data).unwrap() - one).abs() < 1e-12);
    }

    #[test]
    fn full_prefix_family_is_realizable() {
        let m = random_model(2, 2, 6);
        let fam =
            VariationalFamily::new(2, 2, 3, ContextMode::FullPrefix, 0.0, 10.0, 1000).unwrap();
        let ys: Vec<Vec<usize>> = (0..16)
            .map(|i| crate::ssm::decode_sequence(i, 2, 4))
            .collect();
        let best = best_backward_approximation(&m, &fam, &ys).unwrap();
        assert!(best.epsilon_hat <= 1e-8, "{}", best.epsilon_hat);
    }

    #[test]
    fn lower_bound_never_exceeds_estimate() {
        let m = FiniteSSM::from_tables(
            2,
            2,
            vec![0.9, 0.1, 0.1, 0.9],
            vec![0.85, 0.15, 0.15, 0.85],
            vec![0.5, 0.5],
        )
        .unwrap();
        let fam = VariationalFamily::new(2, 2, 3, ContextMode::Window(1), 0.0, 10.0, 1000).unwrap();
        let ys: Vec<Vec<usize>> = (0..16)
            .map(|i| crate::ssm::decode_sequence(i, 2, 4))
            .collect();
        let best = best_backward_approximation(&m, &fam, &ys).unwrap();
        assert!(best.epsilon_hat > 1e-3);
        assert!(best.epsilon_lower <= best.epsilon_hat);
        assert!(best.epsilon_hat - best.epsilon_lower < 1e-6 * best.epsilon_hat.max(1.0));
    }

    #[test]
    fn model_backward_family_at_the_model_is_exact() {
        let shape = ModelShape::new(2, 3).unwrap();
        let mf = ModelFamily::clipped(shape, 10.0);
        let qf =
            VariationalFamily::new(2, 3, 3, ContextMode::ModelBackward, 0.0, 10.0, 1000).unwrap();
        assert_eq!(qf.dim(), shape.param_dim());
        assert!(!qf.is_tabular());
        let theta = ParamBox::symmetric(mf.dim(), 2.0).sample(&mut rng_from_seed(3));
        let model = mf.model(&theta).unwrap();
        let y = [2, 0, 1, 1];
        let law = qf.law(&theta, &y).unwrap();
        let e = elbo(&model, &law, &y).unwrap();
        assert!(e.kl.abs() < 1e-12, "{}", e.kl);
        let ys = vec![y.to_vec(), vec![0, 0, 0, 0]];
        let best = best_backward_approximation(&model, &qf, &ys).unwrap();
        assert!(best.epsilon_hat < 1e-12);
    }

    #[test]
    fn model_backward_gradient_matches_differences() {
        let shape = ModelShape::new(2, 2).unwrap();
        let mf = ModelFamily::clipped(shape, 10.0);
        let qf =
            VariationalFamily::new(2, 2, 2, ContextMode::ModelBackward, 0.02, 10.0, 1000).unwrap();
        let mut rng = rng_from_seed(12);
        let theta = ParamBox::symmetric(mf.dim(), 1.5).sample(&mut rng);
        let phi = ParamBox::symmetric(qf.dim(), 1.5).sample(&mut rng);
        let data = [
            WeightedSequence { y: vec![0, 1, 1], weight: 0.6, logp_data: -2.0 },
            WeightedSequence { y: vec![1, 1, 0], weight: 0.4, logp_data: -2.2 },
        ];
        let obj = LossObjective { model_family: &mf, q_family: &qf, data: &data };
        let mut x = theta.clone();
        x.extend_from_slice(&phi);
        let mut g = vec![0.0; x.len()];
        obj.evaluate(&theta, &phi, Some(&mut g));
        let mut fd = vec![0.0; x.len()];
        crate::optim::central_difference(
            |z| {
                let (a, b) = z.split_at(mf.dim());
                obj.evaluate(a, b, None)
            },
            &x,
            1e-5,
            &mut fd,
        );
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
