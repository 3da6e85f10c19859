//! State space models: tabular models under a softmax chart, a scalar
//! functional autoregressive model, and data generation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{exp, ln, softmax_chart, sqrt, tanh};
use crate::rng::{categorical, rng_from_seed, uniform};

/// Dimensions of a tabular model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    #[serde(rename = "K")]
    pub states: usize,
    #[serde(rename = "V")]
    pub symbols: usize,
}

impl ModelShape {
    pub fn new(states: usize, symbols: usize) -> Result<Self> {
        if states == 0 || symbols == 0 {
            return Err(Error::InvalidCount("K and V must be at least 1"));
        }
        Ok(Self { states, symbols })
    }

    /// `K(K-1) + K(V-1) + (K-1)`.
    pub fn param_dim(&self) -> usize {
        let (k, v) = (self.states, self.symbols);
        k * (k - 1) + k * (v - 1) + (k - 1)
    }

    pub fn transition_offset(&self, row: usize) -> usize {
        row * (self.states - 1)
    }

    pub fn emission_offset(&self, row: usize) -> usize {
        self.states * (self.states - 1) + row * (self.symbols - 1)
    }

    pub fn initial_offset(&self) -> usize {
        self.states * (self.states - 1) + self.states * (self.symbols - 1)
    }

    /// Every softmax row of the chart as `(kind, row, offset, width)`,
    /// where `width` is the number of entries (free logits + 1).
    pub fn rows(&self) -> Vec<(TableKind, usize, usize, usize)> {
        let mut out = Vec::with_capacity(2 * self.states + 1);
        for r in 0..self.states {
            out.push((
                TableKind::Transition,
                r,
                self.transition_offset(r),
                self.states,
            ));
        }
        for r in 0..self.states {
            out.push((
                TableKind::Emission,
                r,
                self.emission_offset(r),
                self.symbols,
            ));
        }
        out.push((TableKind::Initial, 0, self.initial_offset(), self.states));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    Transition,
    Emission,
    Initial,
}

/// Axis-aligned parameter box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::LengthMismatch {
                left: lower.len(),
                right: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument(
                "box lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// `[-radius, radius]^dim`.
    pub fn symmetric(dim: usize, radius: f64) -> Self {
        Self {
            lower: vec![-radius; dim],
            upper: vec![radius; dim],
        }
    }

    /// Box of half-width `radius` around `center`, intersected with `[-clip, clip]`.
    pub fn around(center: &[f64], radius: f64, clip: f64) -> Self {
        let lower = center
            .iter()
            .map(|c| (c - radius).max(-clip).min(clip))
            .collect();
        let upper = center
            .iter()
            .map(|c| (c + radius).min(clip).max(-clip))
            .collect();
        Self { lower, upper }
    }

    /// The degenerate box holding a single point.
    pub fn point(center: &[f64]) -> Self {
        Self {
            lower: center.to_vec(),
            upper: center.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, &l), &u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(l).min(u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.lower)
                .zip(&self.upper)
                .all(|((v, l), u)| *l <= *v && *v <= *u)
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        crate::math::l2_dist(&self.lower, &self.upper)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| uniform(rng, l, u))
            .collect()
    }

    pub fn is_frozen(&self) -> bool {
        self.lower == self.upper
    }
}

/// Exact infimum and supremum of each softmax entry when the free logits
/// range over `[lo, hi]` and the first logit is pinned at zero.
///
/// The infimum of entry `j` puts its own logit at the lower end and every
/// other logit at the upper end; the supremum is the mirror image.
pub fn softmax_row_extremes(lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = lo.len() + 1;
    let full_lo: Vec<f64> = core::iter::once(0.0).chain(lo.iter().cloned()).collect();
    let full_hi: Vec<f64> = core::iter::once(0.0).chain(hi.iter().cloned()).collect();
    let mut inf = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for j in 0..n {
        inf[j] = extreme_entry(&full_lo, &full_hi, j, true);
        sup[j] = extreme_entry(&full_lo, &full_hi, j, false);
    }
    (inf, sup)
}

fn extreme_entry(lo: &[f64], hi: &[f64], j: usize, minimize: bool) -> f64 {
    let own = if minimize { lo[j] } else { hi[j] };
    let others = |i: usize| if minimize { hi[i] } else { lo[i] };
    let mut denom = 1.0;
    for i in 0..lo.len() {
        if i != j {
            denom += exp(others(i) - own);
        }
    }
    1.0 / denom
}

/// Tabular state space model with counting reference measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSSM {
    shape: ModelShape,
    theta: Option<Vec<f64>>,
    transition: Vec<f64>,
    emission: Vec<f64>,
    initial: Vec<f64>,
}

/// Build a model from chart coordinates.
pub fn build_finite_ssm(theta: &[f64], states: usize, symbols: usize) -> Result<FiniteSSM> {
    let shape = ModelShape::new(states, symbols)?;
    if theta.len() != shape.param_dim() {
        return Err(Error::ParameterShape {
            expected: shape.param_dim(),
            found: theta.len(),
        });
    }
    let (k, v) = (states, symbols);
    let mut transition = vec![0.0; k * k];
    let mut emission = vec![0.0; k * v];
    let mut initial = vec![0.0; k];
    for r in 0..k {
        let o = shape.transition_offset(r);
        softmax_chart(&theta[o..o + k - 1], &mut transition[r * k..(r + 1) * k]);
        let o = shape.emission_offset(r);
        softmax_chart(&theta[o..o + v - 1], &mut emission[r * v..(r + 1) * v]);
    }
    let o = shape.initial_offset();
    softmax_chart(&theta[o..o + k - 1], &mut initial);
    Ok(FiniteSSM {
        shape,
        theta: Some(theta.to_vec()),
        transition,
        emission,
        initial,
    })
}

fn check_stochastic(name: &str, rows: &[f64], width: usize) -> Result<()> {
    for (r, row) in rows.chunks(width).enumerate() {
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidTable(format!(
                "{name} row {r} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidTable(format!("{name} row {r} sums to {s}")));
        }
    }
    Ok(())
}

impl FiniteSSM {
    /// Model given directly by its tables (row-major), with no chart.
    pub fn from_tables(
        states: usize,
        symbols: usize,
        transition: Vec<f64>,
        emission: Vec<f64>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let shape = ModelShape::new(states, symbols)?;
        let check_len = |found: usize, expected: usize| {
            if found != expected {
                Err(Error::LengthMismatch {
                    left: found,
                    right: expected,
                })
            } else {
                Ok(())
            }
        };
        check_len(transition.len(), states * states)?;
        check_len(emission.len(), states * symbols)?;
        check_len(initial.len(), states)?;
        check_stochastic("transition", &transition, states)?;
        check_stochastic("emission", &emission, symbols)?;
        check_stochastic("initial", &initial, states)?;
        Ok(Self {
            shape,
            theta: None,
            transition,
            emission,
            initial,
        })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn states(&self) -> usize {
        self.shape.states
    }

    pub fn symbols(&self) -> usize {
        self.shape.symbols
    }

    pub fn theta(&self) -> Option<&[f64]> {
        self.theta.as_deref()
    }

    /// `m(x, x')`.
    #[inline]
    pub fn trans(&self, x: usize, x_next: usize) -> f64 {
        self.transition[x * self.shape.states + x_next]
    }

    /// `g^y(x)`.
    #[inline]
    pub fn emit(&self, x: usize, y: usize) -> f64 {
        self.emission[x * self.shape.symbols + y]
    }

    #[inline]
    pub fn init(&self, x: usize) -> f64 {
        self.initial[x]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn emission(&self) -> &[f64] {
        &self.emission
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn check_sequence(&self, y: &[usize]) -> Result<()> {
        for (time, &symbol) in y.iter().enumerate() {
            if symbol >= self.shape.symbols {
                return Err(Error::InvalidSymbol {
                    time,
                    symbol,
                    alphabet: self.shape.symbols,
                });
            }
        }
        Ok(())
    }

    /// Joint density `p(x_{0:T}, y_{0:T})`.
    pub fn joint(&self, x: &[usize], y: &[usize]) -> f64 {
        let mut p = self.init(x[0]) * self.emit(x[0], y[0]);
        for t in 1..x.len() {
            p *= self.trans(x[t - 1], x[t]) * self.emit(x[t], y[t]);
        }
        p
    }

    /// Draw one `(x, y)` trajectory of length `horizon + 1`.
    pub fn sample_path<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        horizon: usize,
    ) -> (Vec<usize>, Vec<usize>) {
        let (k, v) = (self.shape.states, self.shape.symbols);
        let mut xs = Vec::with_capacity(horizon + 1);
        let mut ys = Vec::with_capacity(horizon + 1);
        let mut x = categorical(rng, &self.initial);
        for t in 0..=horizon {
            if t > 0 {
                x = categorical(rng, &self.transition[x * k..(x + 1) * k]);
            }
            xs.push(x);
            ys.push(categorical(rng, &self.emission[x * v..(x + 1) * v]));
        }
        (xs, ys)
    }

    pub fn model_id(&self) -> String {
        format!("finite-K{}-V{}", self.shape.states, self.shape.symbols)
    }
}

/// A parametric family of tabular models: the chart restricted to a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFamily {
    pub shape: ModelShape,
    pub bounds: ParamBox,
}

impl ModelFamily {
    pub fn new(shape: ModelShape, bounds: ParamBox) -> Result<Self> {
        if bounds.dim() != shape.param_dim() {
            return Err(Error::ParameterShape {
                expected: shape.param_dim(),
                found: bounds.dim(),
            });
        }
        Ok(Self { shape, bounds })
    }

    /// The default `[-R, R]` box.
    pub fn clipped(shape: ModelShape, radius: f64) -> Self {
        Self {
            shape,
            bounds: ParamBox::symmetric(shape.param_dim(), radius),
        }
    }

    pub fn dim(&self) -> usize {
        self.shape.param_dim()
    }

    pub fn model(&self, theta: &[f64]) -> Result<FiniteSSM> {
        build_finite_ssm(theta, self.shape.states, self.shape.symbols)
    }
}

/// Encode `y_{0:T}` as a base-`V` integer with `y_0` least significant.
pub fn encode_sequence(y: &[usize], symbols: usize) -> usize {
    y.iter().rev().fold(0usize, |acc, &s| acc * symbols + s)
}

pub fn decode_sequence(mut index: usize, symbols: usize, len: usize) -> Vec<usize> {
    let mut y = Vec::with_capacity(len);
    for _ in 0..len {
        y.push(index % symbols);
        index /= symbols;
    }
    y
}

/// `base^exp` checked against `cap`.
pub fn checked_count(base: usize, exp: usize, cap: usize) -> Result<usize> {
    let mut size: u128 = 1;
    for _ in 0..exp {
        size = size.saturating_mul(base as u128);
        if size > cap as u128 {
            return Err(Error::EnumerationTooLarge { size, cap });
        }
    }
    Ok(size as usize)
}

/// Probability of every observation sequence of length `T + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceLaw {
    pub symbols: usize,
    pub horizon: usize,
    pub probs: Vec<f64>,
}

impl SequenceLaw {
    pub fn prob(&self, y: &[usize]) -> f64 {
        self.probs[encode_sequence(y, self.symbols)]
    }

    pub fn sequence(&self, index: usize) -> Vec<usize> {
        decode_sequence(index, self.symbols, self.horizon + 1)
    }

    /// Sequences with positive mass, paired with their probability.
    pub fn support(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(move |(i, &p)| (self.sequence(i), p))
    }
}

/// Enumerate the observation law by extending unnormalized forward vectors
/// along the prefix tree.
pub fn exact_sequence_law(model: &FiniteSSM, horizon: usize, cap: usize) -> Result<SequenceLaw> {
    let (k, v) = (model.states(), model.symbols());
    let total = checked_count(v, horizon + 1, cap)?;
    let mut alpha: Vec<f64> = Vec::with_capacity(v * k);
    for y in 0..v {
        for x in 0..k {
            alpha.push(model.init(x) * model.emit(x, y));
        }
    }
    let mut width = v;
    for _ in 1..=horizon {
        let mut next = vec![0.0; width * v * k];
        let mut pred = vec![0.0; k];
        for prefix in 0..width {
            let a = &alpha[prefix * k..(prefix + 1) * k];
            for (xn, p) in pred.iter_mut().enumerate() {
                *p = (0..k).map(|x| a[x] * model.trans(x, xn)).sum();
            }
            for y in 0..v {
                let idx = prefix + y * width;
                for xn in 0..k {
                    next[idx * k + xn] = pred[xn] * model.emit(xn, y);
                }
            }
        }
        alpha = next;
        width *= v;
    }
    debug_assert_eq!(width, total);
    let probs = alpha.chunks(k).map(|a| a.iter().sum()).collect();
    Ok(SequenceLaw {
        symbols: v,
        horizon,
        probs,
    })
}

/// Scalar functional autoregressive model with Gaussian transitions and
/// emissions:
/// `X_t | X_{t-1}=x ~ N(f(x), s(x)^2)`, `Y_t | X_t=x ~ N(h(x), r^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalARModel {
    /// `f(x) = offset + amplitude * tanh(slope * x)`.
    pub mean_offset: f64,
    pub mean_amplitude: f64,
    pub mean_slope: f64,
    /// `s(x)` moves between these bounds with `tanh(x)`.
    pub noise_sd_low: f64,
    pub noise_sd_high: f64,
    /// `h(x) = amplitude * tanh(x)`.
    pub emission_amplitude: f64,
    pub emission_sd: f64,
    pub initial_sd: f64,
}

impl FunctionalARModel {
    pub fn new(
        mean: (f64, f64, f64),
        noise_sd: (f64, f64),
        emission_amplitude: f64,
        emission_sd: f64,
        initial_sd: f64,
    ) -> Result<Self> {
        if !(noise_sd.0 > 0.0 && noise_sd.0 <= noise_sd.1) {
            return Err(Error::InvalidArgument(
                "noise sd bounds must satisfy 0 < low <= high".into(),
            ));
        }
        if !(emission_sd > 0.0 && initial_sd > 0.0) {
            return Err(Error::InvalidArgument(
                "standard deviations must be positive".into(),
            ));
        }
        Ok(Self {
            mean_offset: mean.0,
            mean_amplitude: mean.1,
            mean_slope: mean.2,
            noise_sd_low: noise_sd.0,
            noise_sd_high: noise_sd.1,
            emission_amplitude,
            emission_sd,
            initial_sd,
        })
    }

    pub fn mean(&self, x: f64) -> f64 {
        self.mean_offset + self.mean_amplitude * tanh(self.mean_slope * x)
    }

    pub fn noise_sd(&self, x: f64) -> f64 {
        let w = 0.5 * (1.0 + tanh(x));
        self.noise_sd_low + (self.noise_sd_high - self.noise_sd_low) * w
    }

    pub fn emission_mean(&self, x: f64) -> f64 {
        self.emission_amplitude * tanh(x)
    }

    /// `(inf f, sup f)` over the real line.
    pub fn mean_bounds(&self) -> (f64, f64) {
        let a = self.mean_amplitude.abs();
        (self.mean_offset - a, self.mean_offset + a)
    }

    pub fn noise_bounds(&self) -> (f64, f64) {
        (self.noise_sd_low, self.noise_sd_high)
    }

    pub fn transition_density(&self, x: f64, x_next: f64) -> f64 {
        normal_pdf(x_next, self.mean(x), self.noise_sd(x))
    }

    pub fn emission_density(&self, x: f64, y: f64) -> f64 {
        normal_pdf(y, self.emission_mean(x), self.emission_sd)
    }

    pub fn sample_path<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        horizon: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut xs = Vec::with_capacity(horizon + 1);
        let mut ys = Vec::with_capacity(horizon + 1);
        let mut x = self.initial_sd * std_normal.sample(rng);
        for t in 0..=horizon {
            if t > 0 {
                x = self.mean(x) + self.noise_sd(x) * std_normal.sample(rng);
            }
            xs.push(x);
            ys.push(self.emission_mean(x) + self.emission_sd * std_normal.sample(rng));
        }
        (xs, ys)
    }
}

pub fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    exp(-0.5 * z * z) / (sd * sqrt(2.0 * core::f64::consts::PI))
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub theta: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observations {
    Symbols(Vec<Vec<usize>>),
    Reals(Vec<Vec<f64>>),
}

/// `n` i.i.d. observation sequences of length `T + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "V")]
    pub alphabet: Option<usize>,
    pub seed: u64,
    pub generator: Provenance,
    pub sequences: Observations,
}

impl Dataset {
    /// Wrap symbol sequences, checking lengths and alphabet.
    pub fn from_symbols(
        sequences: Vec<Vec<usize>>,
        symbols: usize,
        generator: Provenance,
    ) -> Result<Self> {
        let n = sequences.len();
        if n == 0 {
            return Err(Error::InvalidCount("a dataset needs at least one sequence"));
        }
        let len = sequences[0].len();
        if len == 0 {
            return Err(Error::InvalidCount(
                "sequences need at least one observation",
            ));
        }
        for s in &sequences {
            if s.len() != len {
                return Err(Error::LengthMismatch {
                    left: s.len(),
                    right: len,
                });
            }
            if let Some((time, &symbol)) = s.iter().enumerate().find(|(_, &y)| y >= symbols) {
                return Err(Error::InvalidSymbol {
                    time,
                    symbol,
                    alphabet: symbols,
                });
            }
        }
        Ok(Self {
            n,
            horizon: len - 1,
            alphabet: Some(symbols),
            seed: generator.seed,
            generator,
            sequences: Observations::Symbols(sequences),
        })
    }

    pub fn symbols(&self) -> Option<&[Vec<usize>]> {
        match &self.sequences {
            Observations::Symbols(s) => Some(s),
            Observations::Reals(_) => None,
        }
    }

    /// Distinct symbol sequences with their multiplicities.
    pub fn counts(&self) -> Option<BTreeMap<Vec<usize>, usize>> {
        let seqs = self.symbols()?;
        let mut map = BTreeMap::new();
        for s in seqs {
            *map.entry(s.clone()).or_insert(0) += 1;
        }
        Some(map)
    }
}

/// A model that can generate datasets.
pub enum Generator<'a> {
    Finite(&'a FiniteSSM),
    Autoregressive(&'a FunctionalARModel),
}

/// Draw `n` i.i.d. sequences of length `horizon + 1` with a fresh stream
/// seeded by `seed`.
pub fn sample_sequences(
    model: Generator<'_>,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidCount("n must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    match model {
        Generator::Finite(m) => {
            let seqs = (0..n).map(|_| m.sample_path(&mut rng, horizon).1).collect();
            let generator = Provenance {
                model_id: m.model_id(),
                theta: m.theta().map(<[f64]>::to_vec).unwrap_or_default(),
                seed,
            };
            Dataset::from_symbols(seqs, m.symbols(), generator)
        }
        Generator::Autoregressive(m) => {
            let seqs = (0..n).map(|_| m.sample_path(&mut rng, horizon).1).collect();
            Ok(Dataset {
                n,
                horizon,
                alphabet: None,
                seed,
                generator: Provenance {
                    model_id: "functional-ar".into(),
                    theta: vec![
                        m.mean_offset,
                        m.mean_amplitude,
                        m.mean_slope,
                        m.noise_sd_low,
                        m.noise_sd_high,
                        m.emission_amplitude,
                        m.emission_sd,
                        m.initial_sd,
                    ],
                    seed,
                },
                sequences: Observations::Reals(seqs),
            })
        }
    }
}

/// Log of a probability, mapping zero to `-inf`.
#[inline]
pub fn safe_ln(p: f64) -> f64 {
    if p > 0.0 {
        ln(p)
    } else {
        f64::NEG_INFINITY
    }
}
