//! The M-estimator, exact risk, the family oracle and the n/T experiments.
//!
//! The experiments are split into independent units (`fit_replicate`,
//! `oracle_for_cell`, ...) so a caller can run them in parallel and merge in
//! key order; `scaling_experiment` and `corollary_experiment` run them
//! sequentially.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::filter_forward;
use crate::math::{ln, median, ols, quantile_sorted, sqrt};
use crate::optim::{central_difference, projected_gradient, Objective, OptimOptions};
use crate::rng::{derive_seed, rng_from_seed};
use crate::ssm::{
    exact_sequence_law, safe_ln, sample_sequences, FiniteSSM, Generator, ModelFamily, ModelShape,
    ParamBox, SequenceLaw,
};
use crate::variational::{
    best_backward_approximation, group_sequences, kl_backward_chain, loss_from_inference,
    ContextMode, LossObjective, VariationalFamily, WeightedSequence,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Analytic,
    /// Central differences with step `FitConfig::fd_step`.
    CentralDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Random starts, the first of which is the box center.
    pub starts: usize,
    pub options: OptimOptions,
    pub seed: u64,
    pub gradient: GradientMode,
    pub fd_step: f64,
    /// Extra starting points `(θ, φ)` concatenated, tried before the others.
    #[serde(default)]
    pub warm_starts: Vec<Vec<f64>>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            starts: 8,
            options: OptimOptions::default(),
            seed: 0,
            gradient: GradientMode::Analytic,
            fd_step: 1e-6,
            warm_starts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub phi_hat: Vec<f64>,
    pub final_loss: f64,
    /// Loss after each iterate of the winning start.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub seed: u64,
    pub restarts: usize,
    /// Index of the winning start.
    pub best_start: usize,
    /// Final loss of every start.
    pub start_losses: Vec<f64>,
}

struct FiniteDifference<'a> {
    inner: &'a LossObjective<'a>,
    step: f64,
}

impl Objective for FiniteDifference<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(x)
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        central_difference(|z| self.inner.value(z), x, self.step, grad);
        self.inner.value(x)
    }
}

fn joint_box(model_family: &ModelFamily, q_family: &VariationalFamily) -> ParamBox {
    let mut lower = model_family.bounds.lower.clone();
    lower.extend_from_slice(&q_family.bounds.lower);
    let mut upper = model_family.bounds.upper.clone();
    upper.extend_from_slice(&q_family.bounds.upper);
    ParamBox { lower, upper }
}

/// Minimize the weighted empirical loss by multi-start projected gradient
/// descent. Deterministic given `config.seed`; ties go to the earliest start.
pub fn fit(
    data: &[WeightedSequence],
    model_family: &ModelFamily,
    q_family: &VariationalFamily,
    config: &FitConfig,
) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::InvalidCount("dataset is empty"));
    }
    for d in data {
        if d.y.len() != q_family.horizon + 1 {
            return Err(Error::LengthMismatch {
                left: d.y.len(),
                right: q_family.horizon + 1,
            });
        }
    }
    if model_family.shape.states != q_family.states
        || model_family.shape.symbols != q_family.symbols
    {
        return Err(Error::InvalidArgument(
            "model and variational families disagree on K or V".into(),
        ));
    }
    let bounds = joint_box(model_family, q_family);
    let obj = LossObjective {
        model_family,
        q_family,
        data,
    };
    let fd = FiniteDifference {
        inner: &obj,
        step: config.fd_step,
    };
    let mut rng = rng_from_seed(config.seed);
    let mut starts: Vec<Vec<f64>> = config.warm_starts.clone();
    if config.starts > 0 {
        starts.push(bounds.center());
    }
    for _ in 1..config.starts {
        starts.push(bounds.sample(&mut rng));
    }
    let mut best: Option<(usize, crate::optim::OptimOutcome)> = None;
    let mut start_losses = Vec::with_capacity(starts.len());
    let mut failures = Vec::new();
    for (i, x0) in starts.iter().enumerate() {
        if x0.len() != bounds.dim() {
            return Err(Error::ParameterShape {
                expected: bounds.dim(),
                found: x0.len(),
            });
        }
        let out = match config.gradient {
            GradientMode::Analytic => projected_gradient(&obj, &bounds, x0, &config.options),
            GradientMode::CentralDifference => {
                projected_gradient(&fd, &bounds, x0, &config.options)
            }
        };
        start_losses.push(out.value);
        if !out.value.is_finite() {
            failures.push(i);
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| out.value < b.value) {
            best = Some((i, out));
        }
    }
    let Some((best_start, out)) = best else {
        return Err(Error::OptimizationFailure {
            starts: starts.len(),
            detail: format!("loss is not finite at any start (failed starts {failures:?})"),
        });
    };
    let (theta, phi) = out.x.split_at(model_family.dim());
    Ok(FitResult {
        theta_hat: theta.to_vec(),
        phi_hat: phi.to_vec(),
        final_loss: out.value,
        trace: out.trace,
        converged: out.converged,
        seed: config.seed,
        restarts: starts.len(),
        best_start,
        start_losses,
    })
}

/// Weighted sequences of a law, with `ln p_D` as the data log-density.
pub fn law_as_data(law: &SequenceLaw) -> Vec<WeightedSequence> {
    law.support()
        .map(|(y, p)| WeightedSequence {
            y,
            weight: p,
            logp_data: ln(p),
        })
        .collect()
}

/// Group a sample, using the data model for `ln p_D` when it is known.
pub fn sample_as_data(
    sequences: &[Vec<usize>],
    data_model: Option<&FiniteSSM>,
) -> Vec<WeightedSequence> {
    group_sequences(sequences, |y| match data_model {
        Some(m) => filter_forward(m, y)
            .map(|r| r.loglik)
            .unwrap_or(f64::NEG_INFINITY),
        None => 0.0,
    })
}

/// `∫ m(θ, φ, y) p_D(dy)` and its two parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub risk: f64,
    /// `KL(P_D ‖ P^Y_θ)`.
    pub kl_data: f64,
    /// `E_{P_D} KL(Q_φ ‖ Φ_θ)`.
    pub kl_post: f64,
    /// Standard error of `risk` when it was estimated by Monte Carlo.
    pub standard_error: Option<f64>,
    pub samples: Option<usize>,
}

impl RiskBreakdown {
    /// 95% normal half-width, if estimated.
    pub fn half_width(&self) -> Option<f64> {
        self.standard_error.map(|s| 1.96 * s)
    }
}

/// Exact risk against an enumerated data law. `kl_data` is computed from the
/// model's own enumerated sequence law, independently of the per-sequence
/// losses that make up `risk`.
pub fn risk_from_law(
    model: &FiniteSSM,
    q_family: &VariationalFamily,
    phi: &[f64],
    law: &SequenceLaw,
    cap: usize,
) -> Result<RiskBreakdown> {
    let model_law = exact_sequence_law(model, law.horizon, cap)?;
    let mut risk = 0.0;
    let mut kl_data = 0.0;
    let mut kl_post = 0.0;
    for (y, p) in law.support() {
        let inf = match filter_forward(model, &y) {
            Ok(r) => r,
            Err(Error::ImpossibleObservation { .. }) => {
                return Ok(RiskBreakdown {
                    risk: f64::INFINITY,
                    kl_data: f64::INFINITY,
                    kl_post: f64::NAN,
                    standard_error: None,
                    samples: None,
                })
            }
            Err(e) => return Err(e),
        };
        let q = q_family.law(phi, &y)?;
        let lv = loss_from_inference(&inf, &q, ln(p))?;
        risk += p * lv.loss;
        kl_post += p * lv.kl;
        kl_data += p * (ln(p) - safe_ln(model_law.prob(&y)));
    }
    Ok(RiskBreakdown {
        risk,
        kl_data,
        kl_post,
        standard_error: None,
        samples: None,
    })
}

/// Monte Carlo risk from `samples` draws of the data model.
pub fn mc_risk(
    model: &FiniteSSM,
    q_family: &VariationalFamily,
    phi: &[f64],
    data_model: &FiniteSSM,
    samples: usize,
    seed: u64,
) -> Result<RiskBreakdown> {
    if samples < 2 {
        return Err(Error::InvalidCount(
            "Monte Carlo needs at least two samples",
        ));
    }
    let data = sample_sequences(
        Generator::Finite(data_model),
        samples,
        q_family.horizon,
        seed,
    )?;
    let ys = data.symbols().unwrap_or_default();
    let (mut s, mut s2, mut kd, mut kp) = (0.0, 0.0, 0.0, 0.0);
    for y in ys {
        let lp = filter_forward(data_model, y)?.loglik;
        let inf = filter_forward(model, y)?;
        let q = q_family.law(phi, y)?;
        let lv = loss_from_inference(&inf, &q, lp)?;
        s += lv.loss;
        s2 += lv.loss * lv.loss;
        kd += lv.loglik_gap;
        kp += lv.kl;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(RiskBreakdown {
        risk: mean,
        kl_data: kd / n,
        kl_post: kp / n,
        standard_error: Some(sqrt(var / n)),
        samples: Some(samples),
    })
}

/// Exact risk by enumeration, falling back to `mc_samples` Monte Carlo draws
/// when the sequence space exceeds `cap`.
pub fn exact_risk(
    model: &FiniteSSM,
    q_family: &VariationalFamily,
    phi: &[f64],
    data_model: &FiniteSSM,
    cap: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<RiskBreakdown> {
    match exact_sequence_law(data_model, q_family.horizon, cap) {
        Ok(law) => risk_from_law(model, q_family, phi, &law, cap),
        Err(Error::EnumerationTooLarge { .. }) => {
            mc_risk(model, q_family, phi, data_model, mc_samples, seed)
        }
        Err(e) => Err(e),
    }
}

/// `𝖤_T`: the family minimum of the exact risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub value: f64,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub converged: bool,
    pub restarts: usize,
}

/// Minimize the exact risk over the family with `config.starts` random
/// starts plus the warm starts in `config`.
pub fn oracle_risk(
    model_family: &ModelFamily,
    q_family: &VariationalFamily,
    law: &SequenceLaw,
    config: &FitConfig,
) -> Result<OracleResult> {
    let data = law_as_data(law);
    let f = fit(&data, model_family, q_family, config)?;
    Ok(OracleResult {
        value: f.final_loss,
        theta: f.theta_hat,
        phi: f.phi_hat,
        converged: f.converged,
        restarts: f.restarts,
    })
}

fn family_from(shape: ModelShape, theta_star: &[f64], radius: f64) -> Result<ModelFamily> {
    let bounds = if radius > 0.0 {
        ParamBox::around(theta_star, radius, f64::INFINITY)
    } else {
        ParamBox::point(theta_star)
    };
    ModelFamily::new(shape, bounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    #[serde(rename = "K")]
    pub states: usize,
    #[serde(rename = "V")]
    pub symbols: usize,
    /// Data-generating parameter; the model family is a box around it.
    pub theta_star: Vec<f64>,
    /// Half-width of the model box; zero freezes the family at `theta_star`.
    pub model_radius: f64,
    pub context_mode: ContextMode,
    /// Half-width of the symmetric variational box.
    pub q_radius: f64,
    #[serde(default)]
    pub floor: f64,
    pub n_grid: Vec<usize>,
    #[serde(rename = "T_grid")]
    pub t_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub options: OptimOptions,
    #[serde(default = "default_oracle_factor")]
    pub oracle_factor: usize,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default = "default_cap")]
    pub enum_cap: usize,
}

fn default_starts() -> usize {
    8
}

fn default_oracle_factor() -> usize {
    10
}

fn default_bootstrap() -> usize {
    1000
}

fn default_cap() -> usize {
    crate::DEFAULT_ENUM_CAP
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.t_grid.is_empty() {
            return Err(Error::InvalidArgument(
                "n_grid and T_grid must be nonempty".into(),
            ));
        }
        if self.n_grid.contains(&0) {
            return Err(Error::InvalidCount("every n must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidCount("replicates must be at least 1"));
        }
        let shape = ModelShape::new(self.states, self.symbols)?;
        if self.theta_star.len() != shape.param_dim() {
            return Err(Error::ParameterShape {
                expected: shape.param_dim(),
                found: self.theta_star.len(),
            });
        }
        Ok(())
    }

    /// Index of grid cell `(T, n)`; replicate seeds derive from it.
    pub fn cell_index(&self, t_index: usize, n_index: usize) -> usize {
        t_index * self.n_grid.len() + n_index
    }

    pub fn replicate_seed(&self, t_index: usize, n_index: usize, rep: usize) -> u64 {
        derive_seed(
            self.seed,
            &[self.cell_index(t_index, n_index) as u64, rep as u64],
        )
    }
}

/// Everything shared by the replicates of one horizon.
#[derive(Debug, Clone)]
pub struct HorizonSetup {
    pub horizon: usize,
    pub truth: FiniteSSM,
    pub model_family: ModelFamily,
    pub q_family: VariationalFamily,
    pub law: SequenceLaw,
}

pub fn horizon_setup(
    states: usize,
    symbols: usize,
    theta_star: &[f64],
    model_radius: f64,
    mode: ContextMode,
    q_radius: f64,
    floor: f64,
    horizon: usize,
    cap: usize,
) -> Result<HorizonSetup> {
    let shape = ModelShape::new(states, symbols)?;
    let truth = crate::ssm::build_finite_ssm(theta_star, states, symbols)?;
    let model_family = family_from(shape, theta_star, model_radius)?;
    let q_family = VariationalFamily::new(states, symbols, horizon, mode, floor, q_radius, cap)?;
    let law = exact_sequence_law(&truth, horizon, cap)?;
    Ok(HorizonSetup {
        horizon,
        truth,
        model_family,
        q_family,
        law,
    })
}

impl ScalingConfig {
    pub fn setup(&self, horizon: usize) -> Result<HorizonSetup> {
        horizon_setup(
            self.states,
            self.symbols,
            &self.theta_star,
            self.model_radius,
            self.context_mode,
            self.q_radius,
            self.floor,
            horizon,
            self.enum_cap,
        )
    }
}

/// One fitted replicate, before the oracle is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub replicate: usize,
    pub seed: u64,
    pub risk: Option<RiskBreakdown>,
    pub theta_hat: Vec<f64>,
    pub phi_hat: Vec<f64>,
    pub final_loss: f64,
    pub converged: bool,
    pub error: Option<String>,
}

/// Generate, fit and score one replicate.
pub fn fit_replicate(
    setup: &HorizonSetup,
    n: usize,
    replicate: usize,
    seed: u64,
    starts: usize,
    options: &OptimOptions,
    cap: usize,
) -> ReplicateFit {
    let run = || -> Result<(FitResult, RiskBreakdown)> {
        let data = sample_sequences(Generator::Finite(&setup.truth), n, setup.horizon, seed)?;
        let grouped = sample_as_data(data.symbols().unwrap_or_default(), Some(&setup.truth));
        let cfg = FitConfig {
            starts,
            options: *options,
            seed: derive_seed(seed, &[1]),
            ..FitConfig::default()
        };
        let f = fit(&grouped, &setup.model_family, &setup.q_family, &cfg)?;
        let model = setup.model_family.model(&f.theta_hat)?;
        let r = risk_from_law(&model, &setup.q_family, &f.phi_hat, &setup.law, cap)?;
        Ok((f, r))
    };
    match run() {
        Ok((f, r)) => ReplicateFit {
            n,
            horizon: setup.horizon,
            replicate,
            seed,
            risk: Some(r),
            theta_hat: f.theta_hat,
            phi_hat: f.phi_hat,
            final_loss: f.final_loss,
            converged: f.converged,
            error: None,
        },
        Err(e) => ReplicateFit {
            n,
            horizon: setup.horizon,
            replicate,
            seed,
            risk: None,
            theta_hat: Vec::new(),
            phi_hat: Vec::new(),
            final_loss: f64::NAN,
            converged: false,
            error: Some(e.to_string()),
        },
    }
}

/// `𝖤_T` at `factor ×` the fit budget, warm-started from the `starts` fitted
/// points of the horizon with the lowest exact risk.
pub fn oracle_for_setup(
    setup: &HorizonSetup,
    fits: &[&ReplicateFit],
    starts: usize,
    factor: usize,
    options: &OptimOptions,
    seed: u64,
) -> Result<OracleResult> {
    // Only the best fitted points by exact risk; the rest cannot win.
    let mut ok: Vec<&&ReplicateFit> = fits.iter().filter(|f| f.risk.is_some()).collect();
    ok.sort_by(|a, b| {
        let (ra, rb) = (a.risk.as_ref().unwrap().risk, b.risk.as_ref().unwrap().risk);
        ra.total_cmp(&rb)
    });
    let warm = ok
        .iter()
        .take(starts.max(1))
        .map(|f| {
            let mut x = f.theta_hat.clone();
            x.extend_from_slice(&f.phi_hat);
            x
        })
        .collect();
    let cfg = FitConfig {
        starts: starts * factor,
        options: *options,
        seed,
        warm_starts: warm,
        ..FitConfig::default()
    };
    oracle_risk(&setup.model_family, &setup.q_family, &setup.law, &cfg)
}

/// One output row of the scaling experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub replicate: usize,
    pub risk: f64,
    pub excess: f64,
    pub kl_data: f64,
    pub kl_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeEstimate {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Median excess per `n` in grid order.
    pub medians: Vec<f64>,
    pub monotone_nonincreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub oracle: Vec<(usize, f64)>,
    pub slopes: Vec<SlopeEstimate>,
    /// Log-log exponent of median excess in `T`, per `n`.
    pub t_exponents: Vec<(usize, f64)>,
    pub min_excess: f64,
    pub failed_replicates: usize,
    pub total_replicates: usize,
    pub d_star: usize,
    pub d0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub fits: Vec<ReplicateFit>,
    pub summary: ScalingSummary,
}

/// Excess below this is treated as this value on the log scale.
const LOG_FLOOR: f64 = 1e-15;

fn slope_of_medians(ns: &[usize], medians: &[f64]) -> f64 {
    let lx: Vec<f64> = ns.iter().map(|&n| ln(n as f64)).collect();
    let ly: Vec<f64> = medians.iter().map(|&m| ln(m.max(LOG_FLOOR))).collect();
    ols(&lx, &ly).0
}

/// Turn fits and per-horizon oracles into rows and a summary. Rows follow
/// `(T, n, replicate)` order regardless of the order of `fits`.
pub fn summarize_scaling(
    cfg: &ScalingConfig,
    fits: &[ReplicateFit],
    oracles: &[(usize, OracleResult)],
) -> Result<ScalingReport> {
    let mut fits = fits.to_vec();
    fits.sort_by_key(|f| (f.horizon, f.n, f.replicate));
    let failed = fits.iter().filter(|f| f.error.is_some()).count();
    if failed * 10 >= fits.len().max(1) && failed > 0 {
        let first = fits
            .iter()
            .find_map(|f| f.error.clone())
            .unwrap_or_default();
        return Err(Error::OptimizationFailure {
            starts: cfg.starts,
            detail: format!(
                "{failed} of {} replicates failed; first: {first}",
                fits.len()
            ),
        });
    }
    let oracle_of = |t: usize| {
        oracles
            .iter()
            .find(|(h, _)| *h == t)
            .map(|(_, o)| o.value)
            .unwrap_or(0.0)
    };
    let rows: Vec<ScalingRow> = fits
        .iter()
        .filter_map(|f| {
            let r = f.risk?;
            Some(ScalingRow {
                n: f.n,
                horizon: f.horizon,
                replicate: f.replicate,
                risk: r.risk,
                excess: r.risk - oracle_of(f.horizon),
                kl_data: r.kl_data,
                kl_post: r.kl_post,
            })
        })
        .collect();
    let cell = |t: usize, n: usize| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.horizon == t && r.n == n)
            .map(|r| r.excess)
            .collect()
    };
    let mut slopes = Vec::new();
    for (ti, &t) in cfg.t_grid.iter().enumerate() {
        let cells: Vec<Vec<f64>> = cfg.n_grid.iter().map(|&n| cell(t, n)).collect();
        let medians: Vec<f64> = cells.iter().map(|c| median(c)).collect();
        let slope = slope_of_medians(&cfg.n_grid, &medians);
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[0xB007, ti as u64]));
        let mut boots = Vec::with_capacity(cfg.bootstrap);
        for _ in 0..cfg.bootstrap {
            let meds: Vec<f64> = cells
                .iter()
                .map(|c| {
                    let r: Vec<f64> = (0..c.len())
                        .map(|_| c[rng.random_range(0..c.len())])
                        .collect();
                    median(&r)
                })
                .collect();
            boots.push(slope_of_medians(&cfg.n_grid, &meds));
        }
        boots.sort_by(f64::total_cmp);
        let (ci_low, ci_high) = if boots.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                quantile_sorted(&boots, 0.025),
                quantile_sorted(&boots, 0.975),
            )
        };
        let monotone_nonincreasing = medians.windows(2).all(|w| w[1] <= w[0]);
        slopes.push(SlopeEstimate {
            horizon: t,
            slope,
            ci_low,
            ci_high,
            medians,
            monotone_nonincreasing,
        });
    }
    let t_exponents = if cfg.t_grid.len() >= 2 {
        cfg.n_grid
            .iter()
            .map(|&n| {
                let lx: Vec<f64> = cfg.t_grid.iter().map(|&t| ln(t as f64)).collect();
                let ly: Vec<f64> = cfg
                    .t_grid
                    .iter()
                    .map(|&t| ln(median(&cell(t, n)).max(LOG_FLOOR)))
                    .collect();
                (n, ols(&lx, &ly).0)
            })
            .collect()
    } else {
        Vec::new()
    };
    let min_excess = rows.iter().map(|r| r.excess).fold(f64::INFINITY, f64::min);
    let (d_star, d0) = match oracles.first() {
        Some((t, _)) => {
            let s = cfg.setup(*t)?;
            (
                s.model_family.dim() + s.q_family.dim(),
                s.model_family.bounds.diameter() + s.q_family.bounds.diameter(),
            )
        }
        None => (0, 0.0),
    };
    Ok(ScalingReport {
        rows,
        fits: fits.clone(),
        summary: ScalingSummary {
            oracle: oracles.iter().map(|(t, o)| (*t, o.value)).collect(),
            slopes,
            t_exponents,
            min_excess,
            failed_replicates: failed,
            total_replicates: fits.len(),
            d_star,
            d0,
        },
    })
}

/// Sequential scaling experiment.
pub fn scaling_experiment(cfg: &ScalingConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let mut fits = Vec::new();
    let mut oracles = Vec::new();
    for (ti, &t) in cfg.t_grid.iter().enumerate() {
        let setup = cfg.setup(t)?;
        let start = fits.len();
        for (ni, &n) in cfg.n_grid.iter().enumerate() {
            for rep in 0..cfg.replicates {
                fits.push(fit_replicate(
                    &setup,
                    n,
                    rep,
                    cfg.replicate_seed(ti, ni, rep),
                    cfg.starts,
                    &cfg.options,
                    cfg.enum_cap,
                ));
            }
        }
        let mine: Vec<&ReplicateFit> = fits[start..].iter().collect();
        let o = oracle_for_setup(
            &setup,
            &mine,
            cfg.starts,
            cfg.oracle_factor,
            &cfg.options,
            derive_seed(cfg.seed, &[0x0AC1E, ti as u64]),
        )?;
        oracles.push((t, o));
    }
    summarize_scaling(cfg, &fits, &oracles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryConfig {
    #[serde(rename = "K")]
    pub states: usize,
    #[serde(rename = "V")]
    pub symbols: usize,
    pub theta_star: Vec<f64>,
    /// Zero freezes the model family at `theta_star`.
    #[serde(default)]
    pub model_radius: f64,
    /// The deliberately restricted family.
    pub restricted_mode: ContextMode,
    pub q_radius: f64,
    #[serde(default)]
    pub floor: f64,
    pub n_grid: Vec<usize>,
    #[serde(rename = "T_grid")]
    pub t_grid: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub gammas: Vec<f64>,
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub options: OptimOptions,
    #[serde(default = "default_cap")]
    pub enum_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    Restricted,
    Realizable,
}

impl FamilyKind {
    pub fn label(self) -> &'static str {
        match self {
            FamilyKind::Restricted => "restricted",
            FamilyKind::Realizable => "realizable",
        }
    }
}

impl CorollaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.t_grid.is_empty() || self.gammas.is_empty() {
            return Err(Error::InvalidArgument(
                "n_grid, T_grid and gammas must be nonempty".into(),
            ));
        }
        if self.n_grid.contains(&0) || self.replicates == 0 {
            return Err(Error::InvalidCount("n and replicates must be at least 1"));
        }
        let shape = ModelShape::new(self.states, self.symbols)?;
        if self.theta_star.len() != shape.param_dim() {
            return Err(Error::ParameterShape {
                expected: shape.param_dim(),
                found: self.theta_star.len(),
            });
        }
        Ok(())
    }

    pub fn setup(&self, kind: FamilyKind, horizon: usize) -> Result<HorizonSetup> {
        let mode = match kind {
            FamilyKind::Restricted => self.restricted_mode,
            FamilyKind::Realizable => ContextMode::FullPrefix,
        };
        horizon_setup(
            self.states,
            self.symbols,
            &self.theta_star,
            self.model_radius,
            mode,
            self.q_radius,
            self.floor,
            horizon,
            self.enum_cap,
        )
    }

    pub fn replicate_seed(
        &self,
        kind: FamilyKind,
        t_index: usize,
        n_index: usize,
        rep: usize,
    ) -> u64 {
        derive_seed(
            self.seed,
            &[kind as u64, t_index as u64, n_index as u64, rep as u64],
        )
    }
}

/// `ε̂` of a family at the data-generating model, over the data support.
pub fn epsilon_for_setup(setup: &HorizonSetup) -> Result<crate::variational::BestApproximation> {
    let ys: Vec<Vec<usize>> = setup.law.support().map(|(y, _)| y).collect();
    best_backward_approximation(&setup.truth, &setup.q_family, &ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryRow {
    pub family: FamilyKind,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub replicate: usize,
    /// `KL(P_D ‖ P^Y_θ̂) + E KL(Q_φ̂ ‖ Φ_θ̂)`.
    pub lhs: f64,
    pub kl_data: f64,
    pub kl_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryCell {
    pub family: FamilyKind,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub epsilon_hat: f64,
    /// Duality lower bound on the minimax value behind `ε̂`.
    pub epsilon_lower: f64,
    /// `(T + 1) ε̂`.
    pub approximation_term: f64,
    /// `(γ, (1 + γ)(T + 1) ε̂)`.
    pub rhs: Vec<(f64, f64)>,
    /// Family minimum of the population risk.
    pub population_floor: f64,
    /// Median LHS per `n` in grid order.
    pub median_lhs: Vec<f64>,
    /// Median of `LHS − (1 + γ)(T + 1) ε̂` per `n`, for the first `γ`.
    pub median_gap: Vec<f64>,
    pub gap_decreasing: bool,
    /// Relative change of the median LHS over the last two grid points.
    pub last_relative_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub rows: Vec<CorollaryRow>,
    pub cells: Vec<CorollaryCell>,
}

/// Build the per-family, per-horizon summary from fitted replicates.
pub fn summarize_corollary(
    cfg: &CorollaryConfig,
    kind: FamilyKind,
    setup: &HorizonSetup,
    eps: &crate::variational::BestApproximation,
    population_floor: f64,
    fits: &[ReplicateFit],
) -> (Vec<CorollaryRow>, CorollaryCell) {
    let mut fits = fits.to_vec();
    fits.sort_by_key(|f| (f.n, f.replicate));
    let rows: Vec<CorollaryRow> = fits
        .iter()
        .filter_map(|f| {
            let r = f.risk?;
            Some(CorollaryRow {
                family: kind,
                n: f.n,
                horizon: f.horizon,
                replicate: f.replicate,
                lhs: r.kl_data + r.kl_post,
                kl_data: r.kl_data,
                kl_post: r.kl_post,
            })
        })
        .collect();
    let tf = (setup.horizon + 1) as f64;
    let approx = tf * eps.epsilon_hat;
    let rhs: Vec<(f64, f64)> = cfg
        .gammas
        .iter()
        .map(|&g| (g, (1.0 + g) * approx))
        .collect();
    let g0 = rhs[0].1;
    let median_lhs: Vec<f64> = cfg
        .n_grid
        .iter()
        .map(|&n| {
            median(
                &rows
                    .iter()
                    .filter(|r| r.n == n)
                    .map(|r| r.lhs)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let median_gap: Vec<f64> = median_lhs.iter().map(|m| m - g0).collect();
    let gap_decreasing = median_gap.windows(2).all(|w| w[1] <= w[0]);
    let last_relative_change = match median_lhs.len() {
        0 | 1 => f64::NAN,
        l => (median_lhs[l - 1] - median_lhs[l - 2]).abs() / median_lhs[l - 1].abs().max(1e-300),
    };
    (
        rows,
        CorollaryCell {
            family: kind,
            horizon: setup.horizon,
            epsilon_hat: eps.epsilon_hat,
            epsilon_lower: eps.epsilon_lower,
            approximation_term: approx,
            rhs,
            population_floor,
            median_lhs,
            median_gap,
            gap_decreasing,
            last_relative_change,
        },
    )
}

/// Sequential corollary experiment over both families.
pub fn corollary_experiment(cfg: &CorollaryConfig) -> Result<CorollaryReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for kind in [FamilyKind::Restricted, FamilyKind::Realizable] {
        for (ti, &t) in cfg.t_grid.iter().enumerate() {
            let setup = cfg.setup(kind, t)?;
            let eps = epsilon_for_setup(&setup)?;
            let mut fits = Vec::new();
            for (ni, &n) in cfg.n_grid.iter().enumerate() {
                for rep in 0..cfg.replicates {
                    let seed = cfg.replicate_seed(kind, ti, ni, rep);
                    fits.push(fit_replicate(
                        &setup,
                        n,
                        rep,
                        seed,
                        cfg.starts,
                        &cfg.options,
                        cfg.enum_cap,
                    ));
                }
            }
            let refs: Vec<&ReplicateFit> = fits.iter().collect();
            let floor = oracle_for_setup(
                &setup,
                &refs,
                cfg.starts,
                1,
                &cfg.options,
                derive_seed(cfg.seed, &[9, kind as u64, ti as u64]),
            )?;
            let (r, c) = summarize_corollary(cfg, kind, &setup, &eps, floor.value, &fits);
            rows.extend(r);
            cells.push(c);
        }
    }
    Ok(CorollaryReport { rows, cells })
}

/// Expected KL of a fixed variational point against the exact posterior of
/// the data model; the population loss of a frozen pair.
pub fn expected_posterior_kl(
    model: &FiniteSSM,
    q_family: &VariationalFamily,
    phi: &[f64],
    law: &SequenceLaw,
) -> Result<f64> {
    let mut total = 0.0;
    for (y, p) in law.support() {
        let inf = filter_forward(model, &y)?;
        total += p * kl_backward_chain(&q_family.law(phi, &y)?, &inf)?.total;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::ssm::build_finite_ssm;
    use crate::DEFAULT_ENUM_CAP;

    const THETA: [f64; 5] = [0.9, -0.7, 1.1, -0.8, 0.3];

    fn setup(mode: ContextMode, t: usize, radius: f64) -> HorizonSetup {
        horizon_setup(2, 2, &THETA, radius, mode, 6.0, 0.0, t, DEFAULT_ENUM_CAP).unwrap()
    }

    #[test]
    fn truth_with_exact_posterior_has_zero_risk() {
        let s = setup(ContextMode::FullPrefix, 2, 1.0);
        let ys: Vec<Vec<usize>> = s.law.support().map(|(y, _)| y).collect();
        let best = best_backward_approximation(&s.truth, &s.q_family, &ys).unwrap();
        let r = risk_from_law(&s.truth, &s.q_family, &best.phi, &s.law, DEFAULT_ENUM_CAP).unwrap();
        assert!(r.risk.abs() < 1e-8, "{r:?}");
        assert!(r.kl_data.abs() < 1e-12);
    }

    #[test]
    fn risk_decomposes() {
        let s = setup(ContextMode::Window(1), 3, 1.0);
        let mut rng = rng_from_seed(4);
        for _ in 0..20 {
            let th = s.model_family.bounds.sample(&mut rng);
            let ph = s.q_family.bounds.sample(&mut rng);
            let m = s.model_family.model(&th).unwrap();
            let r = risk_from_law(&m, &s.q_family, &ph, &s.law, DEFAULT_ENUM_CAP).unwrap();
            assert!((r.risk - r.kl_data - r.kl_post).abs() < 1e-8);
            assert!(r.kl_data >= -1e-12 && r.kl_post >= 0.0);
            // At the truth the risk is the posterior KL alone.
            let r0 = risk_from_law(&s.truth, &s.q_family, &ph, &s.law, DEFAULT_ENUM_CAP).unwrap();
            let e = expected_posterior_kl(&s.truth, &s.q_family, &ph, &s.law).unwrap();
            assert!((r0.risk - e).abs() < 1e-10);
        }
    }

    #[test]
    fn monte_carlo_agrees_with_enumeration() {
        let s = setup(ContextMode::Window(1), 3, 1.0);
        let mut rng = rng_from_seed(8);
        let th = s.model_family.bounds.sample(&mut rng);
        let ph = s.q_family.bounds.sample(&mut rng);
        let m = s.model_family.model(&th).unwrap();
        let exact = risk_from_law(&m, &s.q_family, &ph, &s.law, DEFAULT_ENUM_CAP).unwrap();
        let mc = mc_risk(&m, &s.q_family, &ph, &s.truth, 100_000, 3).unwrap();
        assert!(
            (exact.risk - mc.risk).abs() <= 4.0 * mc.standard_error.unwrap(),
            "{exact:?} {mc:?}"
        );
        let fallback = exact_risk(&m, &s.q_family, &ph, &s.truth, 4, 1000, 3).unwrap();
        assert!(fallback.standard_error.is_some());
    }

    #[test]
    fn frozen_family_fit_returns_the_point() {
        let s = setup(ContextMode::Window(0), 2, 0.0);
        let mut qf = s.q_family.clone();
        let phi: Vec<f64> = (0..qf.dim()).map(|i| 0.1 * i as f64 - 0.2).collect();
        qf.bounds = ParamBox::point(&phi);
        let data = law_as_data(&s.law);
        let f = fit(&data, &s.model_family, &qf, &FitConfig::default()).unwrap();
        assert_eq!(f.theta_hat, THETA.to_vec());
        assert_eq!(f.phi_hat, phi);
        let e = expected_posterior_kl(&s.truth, &qf, &phi, &s.law).unwrap();
        assert!((f.final_loss - e).abs() < 1e-12);
    }

    #[test]
    fn fit_is_deterministic_and_monotone() {
        let s = setup(ContextMode::FullPrefix, 2, 1.0);
        let d = sample_sequences(Generator::Finite(&s.truth), 200, 2, 5).unwrap();
        let data = sample_as_data(d.symbols().unwrap(), Some(&s.truth));
        let cfg = FitConfig {
            starts: 3,
            seed: 11,
            ..FitConfig::default()
        };
        let a = fit(&data, &s.model_family, &s.q_family, &cfg).unwrap();
        let b = fit(&data, &s.model_family, &s.q_family, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*a.trace.last().unwrap(), a.final_loss);
    }

    #[test]
    fn finite_difference_mode_reaches_the_same_loss() {
        let s = setup(ContextMode::Window(1), 2, 0.5);
        let data = law_as_data(&s.law);
        let mut cfg = FitConfig {
            starts: 1,
            ..FitConfig::default()
        };
        let a = fit(&data, &s.model_family, &s.q_family, &cfg).unwrap();
        cfg.gradient = GradientMode::CentralDifference;
        let b = fit(&data, &s.model_family, &s.q_family, &cfg).unwrap();
        assert!(
            (a.final_loss - b.final_loss).abs() < 1e-6,
            "{} {}",
            a.final_loss,
            b.final_loss
        );
    }

    #[test]
    fn enumerated_fit_recovers_zero_risk() {
        let s = setup(ContextMode::FullPrefix, 2, 1.0);
        let o = oracle_risk(&s.model_family, &s.q_family, &s.law, &FitConfig::default()).unwrap();
        assert!(o.value <= 1e-6, "{o:?}");
    }

    #[test]
    fn restricted_oracle_beats_random_points() {
        let theta = [1.2, -1.2, 1.5, -1.5, 0.0];
        let s = horizon_setup(
            2,
            2,
            &theta,
            0.5,
            ContextMode::Window(0),
            4.0,
            0.0,
            2,
            DEFAULT_ENUM_CAP,
        )
        .unwrap();
        let o = oracle_risk(&s.model_family, &s.q_family, &s.law, &FitConfig::default()).unwrap();
        assert!(o.value > 1e-4);
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let th = s.model_family.bounds.sample(&mut rng);
            let ph = s.q_family.bounds.sample(&mut rng);
            let m = s.model_family.model(&th).unwrap();
            let r = risk_from_law(&m, &s.q_family, &ph, &s.law, DEFAULT_ENUM_CAP).unwrap();
            assert!(o.value <= r.risk + 1e-8);
        }
    }

    #[test]
    fn single_point_oracle_is_its_risk() {
        let s = setup(ContextMode::Shared, 2, 0.0);
        let mut qf = s.q_family.clone();
        let phi = vec![0.4; qf.dim()];
        qf.bounds = ParamBox::point(&phi);
        let o = oracle_risk(&s.model_family, &qf, &s.law, &FitConfig::default()).unwrap();
        let r = risk_from_law(&s.truth, &qf, &phi, &s.law, DEFAULT_ENUM_CAP).unwrap();
        assert!((o.value - r.risk).abs() < 1e-12);
    }

    #[test]
    fn empty_data_and_all_infinite_starts_fail() {
        let s = setup(ContextMode::Shared, 1, 0.0);
        assert!(fit(&[], &s.model_family, &s.q_family, &FitConfig::default()).is_err());
        // A model that cannot emit symbol 1 makes every start infinite.
        let m = build_finite_ssm(&[0.0, 0.0, -800.0, -800.0, 0.0], 2, 2).unwrap();
        assert!(m.emit(0, 1) == 0.0);
        let fam = ModelFamily::new(
            ModelShape::new(2, 2).unwrap(),
            ParamBox::point(&[0.0, 0.0, -800.0, -800.0, 0.0]),
        )
        .unwrap();
        let data = vec![WeightedSequence {
            y: vec![1, 1],
            weight: 1.0,
            logp_data: 0.0,
        }];
        assert!(matches!(
            fit(&data, &fam, &s.q_family, &FitConfig::default()),
            Err(Error::OptimizationFailure { .. })
        ));
    }

    #[test]
    fn gamma_scales_the_approximation_term() {
        let cfg = CorollaryConfig {
            states: 2,
            symbols: 2,
            theta_star: THETA.to_vec(),
            model_radius: 0.0,
            restricted_mode: ContextMode::Window(0),
            q_radius: 4.0,
            floor: 0.0,
            n_grid: vec![16, 32],
            t_grid: vec![1],
            replicates: 2,
            seed: 1,
            gammas: vec![0.1, 1.0, 10.0],
            starts: 2,
            options: OptimOptions::default(),
            enum_cap: DEFAULT_ENUM_CAP,
        };
        let rep = corollary_experiment(&cfg).unwrap();
        for c in &rep.cells {
            for &(g, v) in &c.rhs {
                assert_eq!(v, (1.0 + g) * c.approximation_term);
            }
            assert!(c.epsilon_lower <= c.epsilon_hat + 1e-12);
        }
        assert_eq!(rep.rows.len(), 2 * 2 * 2);
    }

    #[test]
    fn frozen_scaling_has_constant_excess() {
        let cfg = ScalingConfig {
            states: 2,
            symbols: 2,
            theta_star: THETA.to_vec(),
            model_radius: 0.0,
            context_mode: ContextMode::Shared,
            q_radius: 0.0,
            floor: 0.0,
            n_grid: vec![8, 64],
            t_grid: vec![2],
            replicates: 2,
            seed: 3,
            starts: 2,
            options: OptimOptions::default(),
            oracle_factor: 2,
            bootstrap: 10,
            enum_cap: DEFAULT_ENUM_CAP,
        };
        let r = scaling_experiment(&cfg).unwrap();
        for row in &r.rows {
            assert!(row.excess.abs() < 1e-12);
        }
        let mut bad = cfg.clone();
        bad.n_grid.clear();
        assert!(scaling_experiment(&bad).is_err());
    }
}
