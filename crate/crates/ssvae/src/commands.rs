//! One function per subcommand. Each writes its artifacts and the manifest
//! into the output directory.

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

use ssvae_core::bounds::suites::{self, aggregate, Instance, SuiteReport, TrendPoint};
use ssvae_core::bounds::{
    certify_mixing, moment_constants, orlicz_norm_estimate, MixingCertificate, ModelBounds,
    MomentReport, Verdict,
};
use ssvae_core::estimation::{
    epsilon_for_setup, exact_risk, fit, fit_replicate, oracle_for_setup, sample_as_data,
    summarize_corollary, summarize_scaling, CorollaryConfig, CorollaryReport, FamilyKind,
    FitResult, HorizonSetup, ReplicateFit, RiskBreakdown, ScalingConfig, ScalingReport,
};
use ssvae_core::math::chart_logits;
use ssvae_core::rng::derive_seed;
use ssvae_core::ssm::{
    exact_sequence_law, sample_sequences, Dataset, FiniteSSM, Generator, ModelFamily, ParamBox,
};

use crate::config::{
    read_json, DataSource, FitCmdConfig, GenConfig, ModelSpec, ReportConfig, VerifyConfig,
};
use crate::io::{Artifacts, MANIFEST};
use crate::plot::{Plot, Series};

/// Raised when a bound check finds a violation; maps to exit code 2.
#[derive(Debug)]
pub struct BoundViolation(pub Vec<String>);

impl std::fmt::Display for BoundViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "bound violated: {}", self.0.join("; "))
    }
}

impl std::error::Error for BoundViolation {}

// ---------------------------------------------------------------- gen

fn generate(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        bail!(ssvae_core::Error::InvalidCount("n must be at least 1"));
    }
    let ds = match &cfg.model {
        ModelSpec::Autoregressive { autoregressive } => sample_sequences(
            Generator::Autoregressive(autoregressive),
            cfg.n,
            cfg.horizon,
            cfg.seed,
        )?,
        spec => {
            let m = spec.finite()?;
            sample_sequences(Generator::Finite(&m), cfg.n, cfg.horizon, cfg.seed)?
        }
    };
    Ok(ds)
}

pub fn cmd_gen(cfg: &GenConfig, out: &Path) -> Result<()> {
    let ds = generate(cfg)?;
    let a = Artifacts::new(out, "gen", cfg, cfg.seed)?;
    a.json("dataset.json", cfg, &ds)?;
    a.manifest()?;
    Ok(())
}

/// A dataset file as written by `gen`, or a bare dataset document.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let v: serde_json::Value = read_json(path)?;
    let inner = match v.get("result") {
        Some(r) => r.clone(),
        None => v,
    };
    serde_json::from_value(inner).with_context(|| format!("{} is not a dataset", path.display()))
}

// ---------------------------------------------------------------- verify-bounds

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub name: String,
    pub trials: usize,
    pub skipped: usize,
    pub verdict: Verdict,
    pub aux: std::collections::BTreeMap<String, f64>,
}

impl From<&SuiteReport> for SuiteSummary {
    fn from(r: &SuiteReport) -> Self {
        Self {
            name: r.name.clone(),
            trials: r.trials,
            skipped: r.skipped,
            verdict: r.verdict.clone(),
            aux: r.aux.clone(),
        }
    }
}

/// Certificate and constants of the configured model, family and sequence.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSection {
    pub certificate: Option<MixingCertificate>,
    pub constants: Option<ssvae_core::bounds::BoundConstants>,
    pub moments: Option<MomentReport>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub violated: bool,
    pub model: Option<ModelSection>,
    pub checks: Vec<CheckReport>,
    pub suites: Vec<SuiteSummary>,
    pub epsilon_trend: Vec<TrendPoint>,
}

#[derive(Debug, Clone, Serialize)]
struct SlackRow {
    suite: String,
    trial: usize,
    ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
struct HistogramRow {
    suite: String,
    bin_low: f64,
    bin_high: f64,
    count: usize,
}

const HISTOGRAM_BINS: usize = 20;

fn histogram(r: &SuiteReport) -> Vec<HistogramRow> {
    let mut counts = vec![0usize; HISTOGRAM_BINS + 1];
    for &x in &r.ratios {
        let b = if x >= 1.0 || !x.is_finite() {
            HISTOGRAM_BINS
        } else {
            ((x.max(0.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
        };
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramRow {
            suite: r.name.clone(),
            bin_low: i as f64 / HISTOGRAM_BINS as f64,
            bin_high: if i == HISTOGRAM_BINS {
                f64::INFINITY
            } else {
                (i + 1) as f64 / HISTOGRAM_BINS as f64
            },
            count,
        })
        .collect()
}

/// Runs trials until `trials` of them are admissible (not skipped), drawing
/// at most `MAX_DRAW_FACTOR × trials` seeds. Outcomes after the last needed
/// admissible one are dropped, so the result does not depend on batching.
fn run_suite(name: &str, index: u64, trials: usize, seed: u64, f: impl Fn(u64) -> suites::TrialOutcome + Sync) -> SuiteReport {
    let max_draws = (trials * MAX_DRAW_FACTOR) as u64;
    let mut outcomes: Vec<suites::TrialOutcome> = Vec::new();
    let mut admissible = 0;
    while admissible < trials && (outcomes.len() as u64) < max_draws {
        let from = outcomes.len() as u64;
        let to = (from + (trials - admissible) as u64).min(max_draws);
        let batch: Vec<_> = (from..to)
            .into_par_iter()
            .map(|i| f(derive_seed(seed, &[index, i])))
            .collect();
        for o in batch {
            if admissible == trials {
                break;
            }
            admissible += usize::from(o.ratio.is_some());
            outcomes.push(o);
        }
    }
    aggregate(name, &outcomes)
}

const MAX_DRAW_FACTOR: usize = 10;

/// Every bound suite at the configured trial counts, in a fixed order.
pub fn bound_suites(cfg: &VerifyConfig) -> Vec<SuiteReport> {
    let s = cfg.seed;
    let n = cfg.trials;
    let integral_pairs = cfg.integral_pairs;
    vec![
        run_suite("filter_bounds", 0, n, s, suites::filter_bound_trial),
        run_suite("backward_bounds", 1, n, s, suites::backward_bound_trial),
        run_suite("doeblin", 2, n, s, suites::doeblin_trial),
        run_suite("filter_lipschitz", 3, n, s, suites::filter_lipschitz_trial),
        run_suite("kappa_lipschitz", 4, n, s, suites::kappa_trial),
        run_suite("integral_bounds", 5, cfg.integral_trials, s, move |seed| {
            suites::integral_trial(seed, integral_pairs)
        }),
        run_suite("gaussian_envelope", 6, cfg.gaussian_trials, s, suites::gaussian_trial),
    ]
}

fn orlicz_checks() -> Vec<CheckReport> {
    let closed = {
        let c = 2.5;
        let est = orlicz_norm_estimate(&[c; 16], 1.0);
        let want = c / std::f64::consts::LN_2;
        let err = (est - want).abs();
        if err <= 1e-9 {
            Verdict::Holds {
                worst_ratio: err / 1e-9,
            }
        } else {
            Verdict::Violated {
                witness: format!("constant input: {est} vs {want}"),
            }
        }
    };
    let homogeneity = {
        let xs: Vec<f64> = (1..=50).map(|i| ((i * 37) % 11) as f64 * 0.3 + 0.1).collect();
        let base = orlicz_norm_estimate(&xs, 1.5);
        let mut worst = 0.0f64;
        for s in [0.5, 2.0, 3.0, 10.0] {
            let scaled: Vec<f64> = xs.iter().map(|x| s * x).collect();
            let e = orlicz_norm_estimate(&scaled, 1.5);
            worst = worst.max((e - s * base).abs() / (s * base));
        }
        if worst <= 1e-12 {
            Verdict::Holds {
                worst_ratio: worst / 1e-12,
            }
        } else {
            Verdict::Violated {
                witness: format!("relative homogeneity error {worst:e}"),
            }
        }
    };
    vec![
        CheckReport {
            name: "orlicz_constant".into(),
            verdict: closed,
        },
        CheckReport {
            name: "orlicz_homogeneity".into(),
            verdict: homogeneity,
        },
    ]
}

fn theta_of(model: &FiniteSSM) -> Vec<f64> {
    if let Some(t) = model.theta() {
        return t.to_vec();
    }
    let (k, v) = (model.states(), model.symbols());
    let mut theta = Vec::new();
    for r in 0..k {
        theta.extend(chart_logits(&model.transition()[r * k..(r + 1) * k]));
    }
    for r in 0..k {
        theta.extend(chart_logits(&model.emission()[r * v..(r + 1) * v]));
    }
    theta.extend(chart_logits(model.initial()));
    theta
}

fn model_section(cfg: &VerifyConfig, checks: &mut Vec<CheckReport>) -> Result<Option<ModelSection>> {
    let Some(spec) = &cfg.model else {
        return Ok(None);
    };
    let model = spec.finite()?;
    let cert = match certify_mixing(&ModelBounds::from_model(&model)) {
        Ok(c) => c,
        Err(v) => {
            checks.push(CheckReport {
                name: "model_positivity".into(),
                verdict: Verdict::Violated {
                    witness: format!(
                        "{} table, row {}, column {}: entry {}",
                        v.table, v.row, v.col, v.value
                    ),
                },
            });
            return Ok(Some(ModelSection {
                certificate: None,
                constants: None,
                moments: None,
                note: Some("the model fails the positivity requirement".into()),
            }));
        }
    };
    checks.push(CheckReport {
        name: "model_positivity".into(),
        verdict: Verdict::Holds {
            worst_ratio: cert.sigma_minus / cert.sigma_plus,
        },
    });
    let (Some(fspec), Some(y)) = (&cfg.family, &cfg.y) else {
        return Ok(Some(ModelSection {
            certificate: Some(cert),
            constants: None,
            moments: None,
            note: Some("no family or sequence given; constants skipped".into()),
        }));
    };
    model.check_sequence(y)?;
    let theta = theta_of(&model);
    let bounds = if cfg.model_radius > 0.0 {
        ParamBox::around(&theta, cfg.model_radius, f64::INFINITY)
    } else {
        ParamBox::point(&theta)
    };
    let model_family = ModelFamily::new(model.shape(), bounds)?;
    let horizon = y.len() - 1;
    let q_family = fspec.family(model.symbols(), horizon, cfg.enum_cap)?;
    let inst = Instance {
        model_family: model_family.clone(),
        q_family: q_family.clone(),
        y: y.clone(),
    };
    let prep = match inst.prepare() {
        Ok(p) => p,
        Err(reason) => {
            checks.push(CheckReport {
                name: "constants".into(),
                verdict: Verdict::Violated { witness: reason },
            });
            return Ok(Some(ModelSection {
                certificate: Some(cert),
                constants: None,
                moments: None,
                note: None,
            }));
        }
    };
    let family_cert = prep.cert.clone();
    let moments = match exact_sequence_law(&model, horizon, cfg.enum_cap) {
        Ok(law) => moment_constants(&family_cert, &prep.env, &law, |yy| {
            let i = Instance {
                model_family: model_family.clone(),
                q_family: q_family.clone(),
                y: yy.to_vec(),
            };
            let p = i.prepare()?;
            Ok((p.constants, p.kenv))
        })
        .ok(),
        Err(_) => None,
    };
    Ok(Some(ModelSection {
        certificate: Some(cert),
        constants: Some(prep.constants),
        moments,
        note: None,
    }))
}

pub fn verify_bounds(cfg: &VerifyConfig) -> Result<(BoundReport, Vec<SuiteReport>)> {
    let mut checks = Vec::new();
    let model = model_section(cfg, &mut checks)?;
    checks.extend(orlicz_checks());
    let reports = bound_suites(cfg);
    let trend = suites::epsilon_trend(&cfg.epsilon_levels, cfg.trend_instances, cfg.seed);
    let slacks: Vec<f64> = trend.iter().map(|p| p.median_slack).collect();
    let shrinking = slacks.windows(2).all(|w| w[1] <= w[0]);
    checks.push(CheckReport {
        name: "kappa_slack_trend".into(),
        verdict: if shrinking {
            Verdict::Holds {
                worst_ratio: slacks.last().copied().unwrap_or(0.0),
            }
        } else {
            Verdict::Violated {
                witness: format!("median slack by epsilon level: {slacks:?}"),
            }
        },
    });
    let violated = checks.iter().any(|c| c.verdict.is_violated())
        || reports.iter().any(|r| r.verdict.is_violated());
    Ok((
        BoundReport {
            violated,
            model,
            checks,
            suites: reports.iter().map(SuiteSummary::from).collect(),
            epsilon_trend: trend,
        },
        reports,
    ))
}

pub fn cmd_verify_bounds(cfg: &VerifyConfig, out: &Path) -> Result<()> {
    let (report, suites) = verify_bounds(cfg)?;
    let a = Artifacts::new(out, "verify-bounds", cfg, cfg.seed)?;
    a.json("bound_report.json", cfg, &report)?;
    let slack: Vec<SlackRow> = suites
        .iter()
        .flat_map(|r| {
            r.ratios.iter().enumerate().map(|(i, &ratio)| SlackRow {
                suite: r.name.clone(),
                trial: i,
                ratio,
            })
        })
        .collect();
    a.csv("bound_slack.csv", &slack)?;
    let hist: Vec<HistogramRow> = suites.iter().flat_map(histogram).collect();
    a.csv("bound_slack_histogram.csv", &hist)?;
    a.manifest()?;
    if report.violated {
        let mut names: Vec<String> = report
            .checks
            .iter()
            .filter(|c| c.verdict.is_violated())
            .map(|c| c.name.clone())
            .collect();
        names.extend(
            report
                .suites
                .iter()
                .filter(|s| s.verdict.is_violated())
                .map(|s| s.name.clone()),
        );
        return Err(BoundViolation(names).into());
    }
    Ok(())
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub fit: FitResult,
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub d_star: usize,
    pub risk: Option<RiskBreakdown>,
}

#[derive(Debug, Clone, Serialize)]
struct TraceRow {
    iteration: usize,
    loss: f64,
}

pub fn run_fit(cfg: &FitCmdConfig) -> Result<FitReport> {
    let ds = match &cfg.data {
        DataSource::File { dataset } => load_dataset(Path::new(dataset))?,
        DataSource::Generate { generate: g } => generate(g)?,
    };
    let seqs = ds
        .symbols()
        .ok_or_else(|| anyhow!("fit needs a finite-alphabet dataset"))?;
    let symbols = ds
        .alphabet
        .ok_or_else(|| anyhow!("dataset has no alphabet size"))?;
    let data_model = cfg.data_model.as_ref().map(ModelSpec::finite).transpose()?;
    let grouped = sample_as_data(seqs, data_model.as_ref());
    let shape = ssvae_core::ssm::ModelShape::new(cfg.states, symbols)?;
    let center = cfg.center(shape)?;
    let bounds = if cfg.model_radius > 0.0 {
        ParamBox::around(&center, cfg.model_radius, f64::INFINITY)
    } else {
        ParamBox::point(&center)
    };
    let model_family = ModelFamily::new(shape, bounds)?;
    let q_family = cfg.family.family(symbols, ds.horizon, cfg.enum_cap)?;
    let result = fit(&grouped, &model_family, &q_family, &cfg.fit_config(&center))?;
    let risk = match &data_model {
        Some(dm) => {
            let m = model_family.model(&result.theta_hat)?;
            Some(exact_risk(
                &m,
                &q_family,
                &result.phi_hat,
                dm,
                cfg.enum_cap,
                10_000,
                derive_seed(cfg.seed, &[2]),
            )?)
        }
        None => None,
    };
    Ok(FitReport {
        n: ds.n,
        horizon: ds.horizon,
        d_star: model_family.dim() + q_family.dim(),
        fit: result,
        risk,
    })
}

pub fn cmd_fit(cfg: &FitCmdConfig, out: &Path) -> Result<()> {
    let report = run_fit(cfg)?;
    let a = Artifacts::new(out, "fit", cfg, cfg.seed)?;
    a.json("fit.json", cfg, &report)?;
    let rows: Vec<TraceRow> = report
        .fit
        .trace
        .iter()
        .enumerate()
        .map(|(iteration, &loss)| TraceRow { iteration, loss })
        .collect();
    a.csv("fit_trace.csv", &rows)?;
    let plot = Plot {
        title: "empirical loss along the winning start".into(),
        x_label: "iteration".into(),
        y_label: "loss".into(),
        log_x: false,
        log_y: false,
        series: vec![Series {
            label: "loss".into(),
            points: rows.iter().map(|r| (r.iteration as f64, r.loss)).collect(),
            reference: false,
        }],
    };
    a.svg("fit_trace.svg", &plot.render())?;
    a.manifest()?;
    Ok(())
}

// ---------------------------------------------------------------- scaling

/// Parallel version of the scaling experiment. Each replicate owns the
/// seed derived from `(seed, T index, n index, replicate)`, so the report
/// matches the sequential one.
pub fn scaling(cfg: &ScalingConfig) -> Result<ScalingReport> {
    cfg.validate()?;
    let setups: Vec<HorizonSetup> = cfg
        .t_grid
        .iter()
        .map(|&t| cfg.setup(t))
        .collect::<ssvae_core::Result<_>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.t_grid.len())
        .flat_map(|ti| {
            (0..cfg.n_grid.len()).flat_map(move |ni| (0..cfg.replicates).map(move |r| (ti, ni, r)))
        })
        .collect();
    let fits: Vec<ReplicateFit> = jobs
        .par_iter()
        .map(|&(ti, ni, rep)| {
            fit_replicate(
                &setups[ti],
                cfg.n_grid[ni],
                rep,
                cfg.replicate_seed(ti, ni, rep),
                cfg.starts,
                &cfg.options,
                cfg.enum_cap,
            )
        })
        .collect();
    let oracles = setups
        .par_iter()
        .enumerate()
        .map(|(ti, s)| {
            let mine: Vec<&ReplicateFit> = fits.iter().filter(|f| f.horizon == s.horizon).collect();
            oracle_for_setup(
                s,
                &mine,
                cfg.starts,
                cfg.oracle_factor,
                &cfg.options,
                derive_seed(cfg.seed, &[0x0AC1E, ti as u64]),
            )
            .map(|o| (s.horizon, o))
        })
        .collect::<ssvae_core::Result<Vec<_>>>()?;
    Ok(summarize_scaling(cfg, &fits, &oracles)?)
}

fn scaling_plots(cfg: &ScalingConfig, r: &ScalingReport) -> (Plot, Plot) {
    let by_n = Plot {
        title: "median excess risk against n".into(),
        x_label: "n".into(),
        y_label: "excess risk".into(),
        log_x: true,
        log_y: true,
        series: r
            .summary
            .slopes
            .iter()
            .map(|s| Series {
                label: format!("T={} slope {:.2}", s.horizon, s.slope),
                points: cfg
                    .n_grid
                    .iter()
                    .zip(&s.medians)
                    .map(|(&n, &m)| (n as f64, m))
                    .collect(),
                reference: false,
            })
            .collect(),
    };
    let by_t = Plot {
        title: "median excess risk against T".into(),
        x_label: "T".into(),
        y_label: "excess risk".into(),
        log_x: true,
        log_y: true,
        series: cfg
            .n_grid
            .iter()
            .enumerate()
            .map(|(ni, &n)| Series {
                label: format!("n={n}"),
                points: r
                    .summary
                    .slopes
                    .iter()
                    .map(|s| (s.horizon as f64, s.medians[ni]))
                    .collect(),
                reference: false,
            })
            .collect(),
    };
    (by_n, by_t)
}

pub fn cmd_scaling(cfg: &ScalingConfig, out: &Path) -> Result<()> {
    let report = scaling(cfg)?;
    let a = Artifacts::new(out, "scaling", cfg, cfg.seed)?;
    a.csv("scaling.csv", &report.rows)?;
    a.json("scaling_fits.json", cfg, &report.fits)?;
    a.json("scaling_summary.json", cfg, &report.summary)?;
    let (by_n, by_t) = scaling_plots(cfg, &report);
    a.svg("excess_vs_n.svg", &by_n.render())?;
    a.svg("excess_vs_T.svg", &by_t.render())?;
    a.manifest()?;
    Ok(())
}

// ---------------------------------------------------------------- corollary

/// Parallel version of the corollary experiment over both families.
pub fn corollary(cfg: &CorollaryConfig) -> Result<CorollaryReport> {
    cfg.validate()?;
    let mut cells_in: Vec<(FamilyKind, usize, HorizonSetup)> = Vec::new();
    for kind in [FamilyKind::Restricted, FamilyKind::Realizable] {
        for (ti, &t) in cfg.t_grid.iter().enumerate() {
            cells_in.push((kind, ti, cfg.setup(kind, t)?));
        }
    }
    let eps = cells_in
        .par_iter()
        .map(|(_, _, s)| epsilon_for_setup(s))
        .collect::<ssvae_core::Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..cells_in.len())
        .flat_map(|c| {
            (0..cfg.n_grid.len()).flat_map(move |ni| (0..cfg.replicates).map(move |r| (c, ni, r)))
        })
        .collect();
    let fits: Vec<(usize, ReplicateFit)> = jobs
        .par_iter()
        .map(|&(c, ni, rep)| {
            let (kind, ti, setup) = &cells_in[c];
            let seed = cfg.replicate_seed(*kind, *ti, ni, rep);
            (
                c,
                fit_replicate(
                    setup,
                    cfg.n_grid[ni],
                    rep,
                    seed,
                    cfg.starts,
                    &cfg.options,
                    cfg.enum_cap,
                ),
            )
        })
        .collect();
    let cells = (0..cells_in.len())
        .into_par_iter()
        .map(|c| {
            let (kind, ti, setup) = &cells_in[c];
            let mine: Vec<ReplicateFit> = fits
                .iter()
                .filter(|(i, _)| *i == c)
                .map(|(_, f)| f.clone())
                .collect();
            let refs: Vec<&ReplicateFit> = mine.iter().collect();
            let floor = oracle_for_setup(
                setup,
                &refs,
                cfg.starts,
                1,
                &cfg.options,
                derive_seed(cfg.seed, &[9, *kind as u64, *ti as u64]),
            )?;
            Ok(summarize_corollary(cfg, *kind, setup, &eps[c], floor.value, &mine))
        })
        .collect::<ssvae_core::Result<Vec<_>>>()?;
    let mut report = CorollaryReport {
        rows: Vec::new(),
        cells: Vec::new(),
    };
    for (r, c) in cells {
        report.rows.extend(r);
        report.cells.push(c);
    }
    Ok(report)
}

pub fn cmd_corollary(cfg: &CorollaryConfig, out: &Path) -> Result<()> {
    let report = corollary(cfg)?;
    let a = Artifacts::new(out, "corollary", cfg, cfg.seed)?;
    a.csv("corollary.csv", &report.rows)?;
    a.json("corollary_summary.json", cfg, &report.cells)?;
    let mut series = Vec::new();
    for c in &report.cells {
        series.push(Series {
            label: format!("{} T={}", c.family.label(), c.horizon),
            points: cfg
                .n_grid
                .iter()
                .zip(&c.median_lhs)
                .map(|(&n, &m)| (n as f64, m))
                .collect(),
            reference: false,
        });
        if c.approximation_term > 0.0 {
            series.push(Series {
                label: format!("{} T={} (T+1)eps", c.family.label(), c.horizon),
                points: cfg
                    .n_grid
                    .iter()
                    .map(|&n| (n as f64, c.approximation_term))
                    .collect(),
                reference: true,
            });
        }
    }
    let plot = Plot {
        title: "median LHS against n".into(),
        x_label: "n".into(),
        y_label: "KL(data || model) + E KL(Q || posterior)".into(),
        log_x: true,
        log_y: true,
        series,
    };
    a.svg("corollary.svg", &plot.render())?;
    a.manifest()?;
    Ok(())
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, Serialize)]
pub struct ReportEntry {
    pub artifact: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub headline: serde_json::Value,
}

fn headline(command: &str, result: &serde_json::Value) -> serde_json::Value {
    use serde_json::json;
    match command {
        "verify-bounds" => json!({
            "violated": result["violated"],
            "suites": result["suites"].as_array().map(|s| s.iter().map(|x| json!({
                "name": x["name"], "verdict": x["verdict"]["verdict"],
                "worst_ratio": x["verdict"]["worst_ratio"]
            })).collect::<Vec<_>>()),
        }),
        "scaling" if result.get("slopes").is_some() => json!({
            "slopes": result["slopes"].as_array().map(|s| s.iter().map(|x| json!({
                "T": x["T"], "slope": x["slope"], "ci_low": x["ci_low"], "ci_high": x["ci_high"]
            })).collect::<Vec<_>>()),
            "oracle": result["oracle"],
            "min_excess": result["min_excess"],
        }),
        "corollary" => json!(result.as_array().map(|cells| cells.iter().map(|c| json!({
            "family": c["family"], "T": c["T"], "epsilon_hat": c["epsilon_hat"],
            "approximation_term": c["approximation_term"],
            "median_lhs": c["median_lhs"],
        })).collect::<Vec<_>>())),
        "fit" => json!({
            "final_loss": result["fit"]["final_loss"],
            "converged": result["fit"]["converged"],
            "risk": result["risk"],
        }),
        "gen" => json!({"n": result["n"], "T": result["T"]}),
        _ => serde_json::Value::Null,
    }
}

/// Collect the headline numbers of every JSON artifact in `dir`.
pub fn collect_report(dir: &Path) -> Result<Vec<ReportEntry>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json") && n != MANIFEST && n != "report.json")
        .collect();
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let v: serde_json::Value = read_json(&dir.join(&name))?;
        let (Some(command), Some(hash)) = (v["command"].as_str(), v["config_sha256"].as_str())
        else {
            continue;
        };
        out.push(ReportEntry {
            artifact: name,
            command: command.into(),
            config_sha256: hash.into(),
            seed: v["seed"].as_u64().unwrap_or(0),
            headline: headline(command, &v["result"]),
        });
    }
    Ok(out)
}

pub fn cmd_report(cfg: &ReportConfig, out: &Path) -> Result<()> {
    let input = cfg
        .input
        .as_deref()
        .map(Path::new)
        .unwrap_or(out)
        .to_path_buf();
    let entries = collect_report(&input)?;
    let a = Artifacts::new(out, "report", cfg, cfg.seed)?;
    a.json("report.json", cfg, &entries)?;
    a.manifest()?;
    Ok(())
}
