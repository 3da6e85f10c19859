//! Randomized falsification suites. Each trial is a pure function of its
//! seed so callers may run trials in any order or in parallel.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::certificate::{
    certify_mixing, certify_variational, KernelBounds, MixingCertificate, ModelBounds,
};
use super::constants::{backward_bounds, compute_h_functions, filter_bounds, BoundConstants};
use super::doeblin::doeblin_contraction_check;
use super::envelopes::{kernel_envelopes, model_envelopes, KernelEnvelopes, ModelEnvelopes};
use super::gaussian::{gaussian_envelope, sample_gaussian};
use super::orlicz::orlicz_norm_estimate;
use super::Verdict;
use crate::error::Result;
use crate::inference::{filter_forward, tv};
use crate::math::{l2_dist, ln, median, ols};
use crate::rng::{derive_seed, rng_from_seed, uniform, ChaCha8Rng};
use crate::ssm::{ModelFamily, ModelShape, ParamBox};
use crate::variational::{
    kl_backward_chain, loss_m, ContextMode, VariationalFamily, VariationalLaw,
};
use crate::DEFAULT_ENUM_CAP;

/// Relative slack allowed for round-off in every comparison.
const ROUND_OFF: f64 = 1e-10;

/// One admissible configuration: a model family, a variational family and
/// an observation sequence of length `T + 1`.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model_family: ModelFamily,
    pub q_family: VariationalFamily,
    pub y: Vec<usize>,
}

/// Certificates and envelopes of an instance.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub cert: MixingCertificate,
    pub env: ModelEnvelopes,
    pub kenv: KernelEnvelopes,
    pub constants: BoundConstants,
}

impl Instance {
    pub fn prepare(&self) -> core::result::Result<Prepared, String> {
        let cert = certify_mixing(&ModelBounds::from_family(&self.model_family)).map_err(|v| {
            format!(
                "model positivity: {} ({}, {}) = {}",
                v.table, v.row, v.col, v.value
            )
        })?;
        let vcert = certify_variational(&KernelBounds::from_family(&self.q_family, &self.y))
            .map_err(|v| {
                format!(
                    "variational positivity: {} ({}, {}) = {}",
                    v.table, v.row, v.col, v.value
                )
            })?;
        let env = model_envelopes(&self.model_family);
        let kenv = kernel_envelopes(&self.q_family, &self.y);
        let constants = BoundConstants::compute(&cert, &env, &vcert, &kenv, &self.y)?;
        Ok(Prepared {
            cert,
            env,
            kenv,
            constants,
        })
    }
}

fn box_around<R: Rng + ?Sized>(rng: &mut R, dim: usize, spread: f64, radius: f64) -> ParamBox {
    let center = ParamBox::symmetric(dim, spread).sample(rng);
    if rng.random::<f64>() < 0.1 {
        return ParamBox::point(&center);
    }
    ParamBox::around(&center, radius, 10.0)
}

/// Random instance with `K ≤ 4`, `V ≤ 3`, `T ≤ max_horizon`. Ten percent of
/// the families are frozen to a point.
pub fn random_instance(seed: u64, max_horizon: usize) -> Instance {
    let mut rng = rng_from_seed(seed);
    let k = rng.random_range(1..=4);
    let v = rng.random_range(1..=3);
    let mode = match rng.random_range(0..4) {
        0 => ContextMode::FullPrefix,
        1 => ContextMode::Window(rng.random_range(0..=2)),
        2 => ContextMode::Window(1),
        _ => ContextMode::Shared,
    };
    let cap_t = if mode == ContextMode::FullPrefix {
        max_horizon.min(4)
    } else {
        max_horizon
    };
    let big_t = rng.random_range(0..=cap_t);
    let shape = ModelShape::new(k, v).unwrap();
    let radius = uniform(&mut rng, 0.05, 1.0);
    let model_family =
        ModelFamily::new(shape, box_around(&mut rng, shape.param_dim(), 2.0, radius)).unwrap();
    let floor = if rng.random::<bool>() {
        0.0
    } else {
        uniform(&mut rng, 0.0, 0.05) / k as f64
    };
    let mut q_family =
        VariationalFamily::new(k, v, big_t, mode, floor, 1.0, DEFAULT_ENUM_CAP).unwrap();
    let qr = uniform(&mut rng, 0.1, 2.0);
    q_family.bounds = box_around(&mut rng, q_family.dim(), 2.0, qr);
    let model = model_family.model(&model_family.bounds.center()).unwrap();
    let (_, y) = model.sample_path(&mut rng, big_t);
    Instance {
        model_family,
        q_family,
        y,
    }
}

/// Outcome of a single trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    /// Largest `lhs / rhs` in the trial; `None` when the trial was skipped.
    pub ratio: Option<f64>,
    pub violation: Option<String>,
    /// Named side measurements, maximized over the suite.
    pub aux: Vec<(String, f64)>,
}

impl TrialOutcome {
    fn skipped(seed: u64) -> Self {
        Self {
            seed,
            ratio: None,
            violation: None,
            aux: Vec::new(),
        }
    }
}

/// Running maximum of `lhs / rhs`, recording the first violation.
struct Tracker {
    worst: f64,
    violation: Option<String>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            worst: 0.0,
            violation: None,
        }
    }

    fn check(&mut self, lhs: f64, rhs: f64, what: impl FnOnce() -> String) {
        let ok = lhs <= rhs + ROUND_OFF * (1.0 + rhs.abs());
        if !ok && self.violation.is_none() {
            self.violation = Some(format!("{}: {lhs:e} > {rhs:e}", what()));
        }
        if rhs > 0.0 {
            self.worst = self.worst.max(lhs / rhs);
        } else if lhs > ROUND_OFF {
            self.worst = f64::INFINITY;
        }
    }

    fn finish(self, seed: u64, aux: Vec<(String, f64)>) -> TrialOutcome {
        TrialOutcome {
            seed,
            ratio: Some(self.worst),
            violation: self.violation,
            aux,
        }
    }
}

/// Aggregated suite result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    /// Draws, skipped ones included.
    pub trials: usize,
    /// Draws where the check does not apply (no kernels, no certificate).
    pub skipped: usize,
    pub verdict: Verdict,
    /// Per-trial worst ratios, for slack histograms.
    pub ratios: Vec<f64>,
    pub aux: BTreeMap<String, f64>,
}

pub fn aggregate(name: &str, outcomes: &[TrialOutcome]) -> SuiteReport {
    let mut ratios = Vec::new();
    let mut aux: BTreeMap<String, f64> = BTreeMap::new();
    let mut witness = None;
    let mut skipped = 0;
    for o in outcomes {
        match o.ratio {
            Some(r) => ratios.push(r),
            None => skipped += 1,
        }
        if let (None, Some(v)) = (&witness, &o.violation) {
            witness = Some(format!("seed {}: {v}", o.seed));
        }
        for (k, v) in &o.aux {
            let e = aux.entry(k.clone()).or_insert(f64::NEG_INFINITY);
            *e = e.max(*v);
        }
    }
    let verdict = match witness {
        Some(witness) => Verdict::Violated { witness },
        None if ratios.is_empty() => Verdict::Inapplicable {
            reason: "every trial was skipped".into(),
        },
        None => Verdict::Holds {
            worst_ratio: ratios.iter().fold(0.0, |a: f64, &b| a.max(b)),
        },
    };
    SuiteReport {
        name: name.into(),
        trials: outcomes.len(),
        skipped,
        verdict,
        ratios,
        aux,
    }
}

/// Sample a pair in the box: half the time far apart, otherwise a small
/// perturbation, so both the global and the local regime are probed.
fn pair<R: Rng + ?Sized>(rng: &mut R, b: &ParamBox) -> (Vec<f64>, Vec<f64>) {
    let a = b.sample(rng);
    if rng.random::<bool>() {
        return (a, b.sample(rng));
    }
    let scale = if rng.random::<bool>() { 1e-2 } else { 1e-4 };
    let mut c: Vec<f64> = a
        .iter()
        .zip(b.lower.iter().zip(&b.upper))
        .map(|(v, (lo, hi))| v + scale * (hi - lo) * (rng.random::<f64>() - 0.5))
        .collect();
    b.project(&mut c);
    (a, c)
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    rng_from_seed(derive_seed(seed, &[stream]))
}

/// (a) Pointwise filter bounds at a random parameter.
pub fn filter_bound_trial(seed: u64) -> TrialOutcome {
    let inst = random_instance(seed, 6);
    let cert = match certify_mixing(&ModelBounds::from_family(&inst.model_family)) {
        Ok(c) => c,
        Err(_) => return TrialOutcome::skipped(seed),
    };
    let mut rng = trial_rng(seed, 1);
    let mut tr = Tracker::new();
    for _ in 0..5 {
        let model = inst
            .model_family
            .model(&inst.model_family.bounds.sample(&mut rng))
            .unwrap();
        let inf = filter_forward(&model, &inst.y).unwrap();
        let b = filter_bounds(&cert, &model, &inst.y);
        for (t, row) in b.iter().enumerate() {
            for (x, &(lo, hi)) in row.iter().enumerate() {
                let p = inf.filters[t][x];
                tr.check(lo, p, || format!("filter lower t={t} x={x}"));
                tr.check(p, hi, || format!("filter upper t={t} x={x}"));
            }
        }
    }
    tr.finish(seed, Vec::new())
}

/// (b) Backward-kernel bounds. The looser of the two printed versions is
/// asserted; how far each version is from failing is logged in `aux`.
pub fn backward_bound_trial(seed: u64) -> TrialOutcome {
    let inst = random_instance(seed, 6);
    let cert = match certify_mixing(&ModelBounds::from_family(&inst.model_family)) {
        Ok(c) => c,
        Err(_) => return TrialOutcome::skipped(seed),
    };
    let mut rng = trial_rng(seed, 2);
    let mut tr = Tracker::new();
    let (mut stmt, mut proof) = (0.0f64, 0.0f64);
    for _ in 0..5 {
        let model = inst
            .model_family
            .model(&inst.model_family.bounds.sample(&mut rng))
            .unwrap();
        let inf = filter_forward(&model, &inst.y).unwrap();
        let bb = backward_bounds(&cert, &model, &inst.y);
        let k = cert.states;
        for t in 1..inst.y.len() {
            for xt in 0..k {
                let row = inf.backward_row(t, xt);
                for (x, &p) in row.iter().enumerate() {
                    let (lo, hi) = bb.looser(t, x);
                    tr.check(lo, p, || format!("backward lower t={t} x_t={xt} x={x}"));
                    tr.check(p, hi, || format!("backward upper t={t} x_t={xt} x={x}"));
                    let (a, b) = bb.statement[t - 1][x];
                    stmt = stmt.max((a / p).max(p / b));
                    let (a, b) = bb.proof[t - 1][x];
                    proof = proof.max((a / p).max(p / b));
                }
            }
        }
    }
    tr.finish(
        seed,
        vec![
            ("statement_version_worst_ratio".into(), stmt),
            ("proof_version_worst_ratio".into(), proof),
        ],
    )
}

/// (c) Doeblin contraction of a random member of the variational family.
pub fn doeblin_trial(seed: u64) -> TrialOutcome {
    let inst = random_instance(seed, 6);
    let mut rng = trial_rng(seed, 3);
    let phi = inst.q_family.bounds.sample(&mut rng);
    let law = inst.q_family.law(&phi, &inst.y).unwrap();
    let r = doeblin_contraction_check(&law, 20, derive_seed(seed, &[4]));
    match r.verdict {
        Verdict::Holds { worst_ratio } => TrialOutcome {
            seed,
            ratio: Some(worst_ratio),
            violation: None,
            aux: Vec::new(),
        },
        Verdict::Violated { witness } => TrialOutcome {
            seed,
            ratio: Some(f64::INFINITY),
            violation: Some(witness),
            aux: Vec::new(),
        },
        Verdict::Inapplicable { .. } => TrialOutcome::skipped(seed),
    }
}

/// (d) `‖Φ_t(θ) − Φ_t(θ')‖_tv ≤ L_t ‖θ − θ'‖` on random pairs.
pub fn filter_lipschitz_trial(seed: u64) -> TrialOutcome {
    let inst = random_instance(seed, 6);
    let Ok(prep) = inst.prepare() else {
        return TrialOutcome::skipped(seed);
    };
    let mut rng = trial_rng(seed, 5);
    let mut tr = Tracker::new();
    let fam = &inst.model_family;
    for _ in 0..10 {
        let (a, b) = pair(&mut rng, &fam.bounds);
        let d = l2_dist(&a, &b);
        let fa = filter_forward(&fam.model(&a).unwrap(), &inst.y).unwrap();
        let fb = filter_forward(&fam.model(&b).unwrap(), &inst.y).unwrap();
        for t in 0..inst.y.len() {
            tr.check(
                tv(&fa.filters[t], &fb.filters[t]),
                prep.constants.lt[t] * d,
                || format!("L_{t}"),
            );
        }
    }
    tr.finish(seed, Vec::new())
}

/// `Δ = |m(θ,φ,y) − m(θ',φ',y)|`; the data log-density cancels.
pub fn loss_difference(
    inst: &Instance,
    theta: (&[f64], &[f64]),
    phi: (&[f64], &[f64]),
) -> Result<f64> {
    let m = |th: &[f64], ph: &[f64]| -> Result<f64> {
        let model = inst.model_family.model(th)?;
        let q = inst.q_family.law(ph, &inst.y)?;
        Ok(loss_m(&model, &q, &inst.y, 0.0)?.loss)
    };
    Ok((m(theta.0, phi.0)? - m(theta.1, phi.1)?).abs())
}

/// (e) `Δ ≤ (κ₁+κ₄)‖θ−θ'‖ + (κ₂+κ₃)‖φ−φ'‖` on random 4-tuples.
pub fn kappa_trial(seed: u64) -> TrialOutcome {
    let inst = random_instance(seed, 6);
    let Ok(prep) = inst.prepare() else {
        return TrialOutcome::skipped(seed);
    };
    let mut rng = trial_rng(seed, 6);
    let mut tr = Tracker::new();
    let kap = prep.constants.kappas;
    let mut min_slack = f64::INFINITY;
    for _ in 0..10 {
        let (ta, tb) = pair(&mut rng, &inst.model_family.bounds);
        let (pa, pb) = pair(&mut rng, &inst.q_family.bounds);
        let lhs = loss_difference(&inst, (&ta, &tb), (&pa, &pb)).unwrap();
        let rhs =
            kap.theta_coefficient() * l2_dist(&ta, &tb) + kap.phi_coefficient() * l2_dist(&pa, &pb);
        tr.check(lhs, rhs, || "kappa inequality".into());
        if rhs > 0.0 {
            min_slack = min_slack.min(rhs - lhs);
        }
    }
    let aux = if min_slack.is_finite() {
        vec![("negated_min_slack".into(), -min_slack)]
    } else {
        Vec::new()
    };
    tr.finish(seed, aux)
}

/// Integral constants against their defining integral inequalities, and `υ_t`
/// against the directly computed sup-norm of `h_t`.
pub fn integral_trial(seed: u64, pairs: usize) -> TrialOutcome {
    let inst = random_instance(seed, 5);
    let Ok(prep) = inst.prepare() else {
        return TrialOutcome::skipped(seed);
    };
    let mut rng = trial_rng(seed, 7);
    let mut tr = Tracker::new();
    let k = inst.q_family.states;
    let kf = k as f64;
    let big_t = inst.y.len() - 1;
    let integrals = &prep.constants.integrals;
    let mean_abs_log = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(p, q)| (ln(*p) - ln(*q)).abs())
            .sum::<f64>()
            / a.len() as f64
    };
    let mut worst = [0.0f64; 5];
    for _ in 0..pairs {
        let (pa, pb) = pair(&mut rng, &inst.q_family.bounds);
        let dphi = l2_dist(&pa, &pb);
        let (qa, qb) = (
            inst.q_family.law(&pa, &inst.y).unwrap(),
            inst.q_family.law(&pb, &inst.y).unwrap(),
        );
        for t in 1..=big_t {
            let lhs = mean_abs_log(&qa.kernels[t - 1], &qb.kernels[t - 1]);
            tr.check(lhs, integrals.c1[t - 1] * dphi, || format!("c1 t={t}"));
            if integrals.c1[t - 1] * dphi > 0.0 {
                worst[0] = worst[0].max(lhs / (integrals.c1[t - 1] * dphi));
            }
        }
        let lhs = mean_abs_log(&qa.terminal, &qb.terminal);
        tr.check(lhs, integrals.c3 * dphi, || "c3".into());

        let (ta, tb) = pair(&mut rng, &inst.model_family.bounds);
        let dth = l2_dist(&ta, &tb);
        let fa = filter_forward(&inst.model_family.model(&ta).unwrap(), &inst.y).unwrap();
        let fb = filter_forward(&inst.model_family.model(&tb).unwrap(), &inst.y).unwrap();
        for t in 1..=big_t {
            let lhs = mean_abs_log(&fa.backward[t - 1], &fb.backward[t - 1]);
            tr.check(lhs, integrals.c2[t - 1] * dth, || format!("c2 t={t}"));
            if integrals.c2[t - 1] * dth > 0.0 {
                worst[1] = worst[1].max(lhs / (integrals.c2[t - 1] * dth));
            }
        }
        let lhs = mean_abs_log(&fa.filters[big_t], &fb.filters[big_t]);
        tr.check(lhs, integrals.c4 * dth, || "c4".into());
        if integrals.c4 * dth > 0.0 {
            worst[2] = worst[2].max(lhs / (integrals.c4 * dth));
        }

        let h = compute_h_functions(&qa, &fa);
        for (i, (&direct, &bound)) in h.sup_norm.iter().zip(&prep.constants.upsilon).enumerate() {
            tr.check(direct, bound, || format!("upsilon t={}", i + 1));
            if bound > 0.0 {
                worst[3] = worst[3].max(direct / bound);
            }
        }
    }
    let _ = kf;
    tr.finish(
        seed,
        vec![
            ("c1_worst_ratio".into(), worst[0]),
            ("c2_worst_ratio".into(), worst[1]),
            ("c4_worst_ratio".into(), worst[2]),
            ("upsilon_worst_ratio".into(), worst[3]),
        ],
    )
}

/// Gaussian envelope on one random (mean, covariance, x) triple in
/// dimension `≤ 3`.
pub fn gaussian_trial(seed: u64) -> TrialOutcome {
    let mut rng = rng_from_seed(seed);
    let d = rng.random_range(1..=3);
    let m = uniform(&mut rng, 0.0, 2.0);
    let big_m = m + uniform(&mut rng, 0.0, 2.0);
    let lo = uniform(&mut rng, 0.05, 3.0);
    let hi = lo * uniform(&mut rng, 1.0, 5.0);
    let g = sample_gaussian(&mut rng, d, (m, big_m), (lo, hi));
    let x: Vec<f64> = (0..d).map(|_| uniform(&mut rng, -4.0, 4.0)).collect();
    let (a, b) = gaussian_envelope((m, big_m), (lo, hi), &x).unwrap();
    let p = g.density(&x);
    let mut tr = Tracker::new();
    tr.check(a, p, || format!("lower envelope at d={d}"));
    tr.check(p, b, || format!("upper envelope at d={d}"));
    tr.finish(seed, Vec::new())
}

/// Median `lhs / rhs` of the κ inequality at a given `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub epsilon: f64,
    pub median_ratio: f64,
    pub median_slack: f64,
}

/// κ-inequality tightness as the transition box shrinks towards the uniform
/// kernel: each level narrows the transition and initial rows around zero
/// logits so that `σ_− → σ_+` and `ε → 0`.
pub fn epsilon_trend(levels: &[f64], instances: usize, seed: u64) -> Vec<TrendPoint> {
    let (k, v, big_t) = (3usize, 2usize, 3usize);
    let shape = ModelShape::new(k, v).unwrap();
    let mut rng = rng_from_seed(seed);
    let emit_center: Vec<f64> = (0..k * (v - 1))
        .map(|_| uniform(&mut rng, -1.0, 1.0))
        .collect();
    levels
        .iter()
        .map(|&r| {
            let mut lower = vec![0.0; shape.param_dim()];
            let mut upper = vec![0.0; shape.param_dim()];
            for (kind, _, o, w) in shape.rows() {
                for i in o..o + w - 1 {
                    match kind {
                        crate::ssm::TableKind::Emission => {
                            let c = emit_center[i - shape.emission_offset(0)];
                            lower[i] = c - 0.1;
                            upper[i] = c + 0.1;
                        }
                        _ => {
                            lower[i] = -r;
                            upper[i] = r;
                        }
                    }
                }
            }
            let fam = ModelFamily::new(shape, ParamBox::new(lower, upper).unwrap()).unwrap();
            let mut ratios = Vec::new();
            let mut slacks = Vec::new();
            let mut eps = 0.0;
            for i in 0..instances {
                let mut rng = rng_from_seed(derive_seed(seed, &[i as u64]));
                let mut qf = VariationalFamily::new(
                    k,
                    v,
                    big_t,
                    ContextMode::Window(1),
                    0.0,
                    0.5,
                    DEFAULT_ENUM_CAP,
                )
                .unwrap();
                qf.bounds = ParamBox::symmetric(qf.dim(), 0.5);
                let model = fam.model(&fam.bounds.center()).unwrap();
                let (_, y) = model.sample_path(&mut rng, big_t);
                let inst = Instance {
                    model_family: fam.clone(),
                    q_family: qf,
                    y,
                };
                let Ok(prep) = inst.prepare() else { continue };
                eps = prep.cert.epsilon;
                let kap = prep.constants.kappas;
                let (ta, tb) = (fam.bounds.sample(&mut rng), fam.bounds.sample(&mut rng));
                let (pa, pb) = (
                    inst.q_family.bounds.sample(&mut rng),
                    inst.q_family.bounds.sample(&mut rng),
                );
                let lhs = loss_difference(&inst, (&ta, &tb), (&pa, &pb)).unwrap();
                let rhs = kap.theta_coefficient() * l2_dist(&ta, &tb)
                    + kap.phi_coefficient() * l2_dist(&pa, &pb);
                if rhs > 0.0 {
                    ratios.push(lhs / rhs);
                    slacks.push(1.0 - lhs / rhs);
                }
            }
            TrendPoint {
                epsilon: eps,
                median_ratio: median(&ratios),
                median_slack: median(&slacks),
            }
        })
        .collect()
}

/// ψ_α norms of `sup_grid (|ℓ_T(θ)| + KL(Q_φ ‖ Φ_{0:T|T}))` per horizon,
/// with the fitted exponent of their growth in `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub alpha: f64,
    pub horizons: Vec<usize>,
    pub norms: Vec<f64>,
    pub growth_exponent: f64,
}

/// `sequences[i]` holds the data at horizon `horizons[i]`; `q_family(T)`
/// builds the variational family for that horizon. The parameter grid is
/// the box centers plus `grid - 1` seeded random points of each box.
pub fn assumption_a_diagnostic<F>(
    model_family: &ModelFamily,
    q_family: F,
    horizons: &[usize],
    sequences: &[Vec<Vec<usize>>],
    grid: usize,
    alpha: f64,
    seed: u64,
) -> Result<DiagnosticReport>
where
    F: Fn(usize) -> Result<VariationalFamily>,
{
    let mut norms = Vec::with_capacity(horizons.len());
    for (i, (&big_t, data)) in horizons.iter().zip(sequences).enumerate() {
        let qf = q_family(big_t)?;
        let mut rng = rng_from_seed(derive_seed(seed, &[i as u64]));
        let mut points = vec![(model_family.bounds.center(), qf.bounds.center())];
        for _ in 1..grid.max(1) {
            points.push((
                model_family.bounds.sample(&mut rng),
                qf.bounds.sample(&mut rng),
            ));
        }
        let models = points
            .iter()
            .map(|(t, _)| model_family.model(t))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(data.len());
        for y in data {
            let mut best = 0.0f64;
            for (model, (_, phi)) in models.iter().zip(&points) {
                let inf = filter_forward(model, y)?;
                let q: VariationalLaw = qf.law(phi, y)?;
                let kl = kl_backward_chain(&q, &inf)?.total;
                best = best.max(inf.loglik.abs() + kl);
            }
            values.push(best);
        }
        norms.push(orlicz_norm_estimate(&values, alpha));
    }
    let lx: Vec<f64> = horizons.iter().map(|&t| ln(t.max(1) as f64)).collect();
    let ly: Vec<f64> = norms.iter().map(|&v| ln(v)).collect();
    let growth_exponent = if horizons.len() >= 2 {
        ols(&lx, &ly).0
    } else {
        f64::NAN
    };
    Ok(DiagnosticReport {
        alpha,
        horizons: horizons.to_vec(),
        norms,
        growth_exponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{build_finite_ssm, sample_sequences, Generator};

    fn run(f: fn(u64) -> TrialOutcome, n: u64) -> SuiteReport {
        let outs: Vec<_> = (0..n).map(|s| f(derive_seed(99, &[s]))).collect();
        aggregate("t", &outs)
    }

    #[test]
    fn small_suites_hold() {
        for f in [
            filter_bound_trial,
            backward_bound_trial,
            doeblin_trial,
            filter_lipschitz_trial,
            kappa_trial,
            gaussian_trial,
        ] {
            let r = run(f, 30);
            assert!(!r.verdict.is_violated(), "{:?}", r.verdict);
        }
    }

    #[test]
    fn integral_constants_hold() {
        let outs: Vec<_> = (0..20)
            .map(|s| integral_trial(derive_seed(7, &[s]), 20))
            .collect();
        let r = aggregate("integrals", &outs);
        assert!(!r.verdict.is_violated(), "{:?}", r.verdict);
    }

    #[test]
    fn frozen_families_have_zero_constants() {
        let mut inst = random_instance(3, 3);
        inst.model_family.bounds = ParamBox::point(&inst.model_family.bounds.center());
        inst.q_family.bounds = ParamBox::point(&inst.q_family.bounds.center());
        let p = inst.prepare().unwrap();
        assert!(p.constants.lt.iter().all(|&l| l == 0.0));
        let k = p.constants.kappas;
        assert_eq!(
            (k.kappa1, k.kappa2, k.kappa3, k.kappa4),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn k1_diagnostic_is_the_log_likelihood() {
        let shape = ModelShape::new(1, 3).unwrap();
        let theta = [0.3, -0.5];
        let fam = ModelFamily::new(shape, ParamBox::point(&theta)).unwrap();
        let model = build_finite_ssm(&theta, 1, 3).unwrap();
        let data = sample_sequences(Generator::Finite(&model), 50, 2, 1).unwrap();
        let ys = data.symbols().unwrap().to_vec();
        let qf =
            |t| VariationalFamily::new(1, 3, t, ContextMode::Shared, 0.0, 0.0, DEFAULT_ENUM_CAP);
        let r = assumption_a_diagnostic(&fam, qf, &[2], &[ys.clone()], 4, 1.0, 0).unwrap();
        let exact: Vec<f64> = ys
            .iter()
            .map(|y| y.iter().map(|&s| -ln(model.emit(0, s))).sum())
            .collect();
        assert!((r.norms[0] - orlicz_norm_estimate(&exact, 1.0)).abs() < 1e-9);
    }
}
