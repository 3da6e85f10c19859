use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{softmax_chart, sqrt};
use crate::ssm::{ModelFamily, TableKind};
use crate::variational::VariationalFamily;

/// Grid points per free logit when the row is small enough.
pub const GRID_POINTS: usize = 33;
const GRID_BUDGET: usize = 40_000;
const INFLATION: f64 = 1.05;

/// Lipschitz envelopes of `θ ↦ m_θ(x,x')`, `θ ↦ g_θ^y(x)`, `θ ↦ ζ_θ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnvelopes {
    pub states: usize,
    pub symbols: usize,
    /// `M(x, x')` at `[x * K + x']`.
    pub trans: Vec<f64>,
    /// `G^y(x)` at `[x * V + y]`.
    pub emit: Vec<f64>,
    /// `Z(x)`.
    pub init: Vec<f64>,
}

impl ModelEnvelopes {
    pub fn m(&self, x: usize, xn: usize) -> f64 {
        self.trans[x * self.states + xn]
    }

    pub fn g(&self, y: usize, x: usize) -> f64 {
        self.emit[x * self.symbols + y]
    }
}

/// Envelopes of the variational tables used by one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEnvelopes {
    pub states: usize,
    /// `K_{t-1|t}(x_t, x_{t-1})`, `t = 1..=T`.
    pub kernels: Vec<Vec<f64>>,
    pub terminal: Vec<f64>,
}

/// Largest gradient norm of each softmax entry over a grid of the row box,
/// inflated by 5%. Frozen coordinates get a single grid point.
pub fn row_envelope(lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let d = lo.len();
    let n = d + 1;
    if d == 0 {
        return vec![0.0];
    }
    let free = lo.iter().zip(hi).filter(|(a, b)| a < b).count();
    if free == 0 {
        return vec![0.0; n];
    }
    let mut per_dim = GRID_POINTS;
    while per_dim > 3 && per_dim.pow(free as u32) > GRID_BUDGET {
        per_dim -= 1;
    }
    let counts: Vec<usize> = lo
        .iter()
        .zip(hi)
        .map(|(a, b)| if a < b { per_dim } else { 1 })
        .collect();
    let total: usize = counts.iter().product();
    let mut z = vec![0.0; d];
    let mut p = vec![0.0; n];
    let mut best = vec![0.0f64; n];
    for idx in 0..total {
        let mut r = idx;
        for i in 0..d {
            let c = counts[i];
            let j = r % c;
            r /= c;
            z[i] = if c == 1 {
                lo[i]
            } else {
                lo[i] + (hi[i] - lo[i]) * j as f64 / (c - 1) as f64
            };
        }
        softmax_chart(&z, &mut p);
        for (e, b) in best.iter_mut().enumerate() {
            // ∂p_e/∂z_k = p_e (δ_ek - p_k) over the free logits k >= 1.
            let mut s = 0.0;
            for kk in 1..n {
                let dlt = if kk == e { 1.0 } else { 0.0 };
                let v = p[e] * (dlt - p[kk]);
                s += v * v;
            }
            *b = b.max(sqrt(s));
        }
    }
    best.into_iter().map(|b| INFLATION * b).collect()
}

fn box_key(lo: &[f64], hi: &[f64]) -> Vec<u64> {
    lo.iter().chain(hi).map(|x| x.to_bits()).collect()
}

struct EnvelopeCache(BTreeMap<Vec<u64>, Vec<f64>>);

impl EnvelopeCache {
    fn get(&mut self, lo: &[f64], hi: &[f64]) -> Vec<f64> {
        self.0
            .entry(box_key(lo, hi))
            .or_insert_with(|| row_envelope(lo, hi))
            .clone()
    }
}

pub fn model_envelopes(family: &ModelFamily) -> ModelEnvelopes {
    let (k, v) = (family.shape.states, family.shape.symbols);
    let b = &family.bounds;
    let mut out = ModelEnvelopes {
        states: k,
        symbols: v,
        trans: vec![0.0; k * k],
        emit: vec![0.0; k * v],
        init: vec![0.0; k],
    };
    let mut cache = EnvelopeCache(BTreeMap::new());
    for (kind, row, o, width) in family.shape.rows() {
        let env = cache.get(&b.lower[o..o + width - 1], &b.upper[o..o + width - 1]);
        let dst = match kind {
            TableKind::Transition => &mut out.trans[row * k..(row + 1) * k],
            TableKind::Emission => &mut out.emit[row * v..(row + 1) * v],
            TableKind::Initial => &mut out.init[..],
        };
        dst.copy_from_slice(&env);
    }
    out
}

/// Envelopes of the tables used by `y`. A model-backward family has no
/// per-row parameterization and gets infinite envelopes.
pub fn kernel_envelopes(family: &VariationalFamily, y: &[usize]) -> KernelEnvelopes {
    let k = family.states;
    if !family.is_tabular() {
        return KernelEnvelopes {
            states: k,
            kernels: vec![vec![f64::INFINITY; k * k]; family.horizon],
            terminal: vec![f64::INFINITY; k],
        };
    }
    let b = &family.bounds;
    let s = family.scale();
    let mut cache = EnvelopeCache(BTreeMap::new());
    let mut row = |o: usize| -> Vec<f64> {
        cache
            .get(&b.lower[o..o + k - 1], &b.upper[o..o + k - 1])
            .into_iter()
            .map(|e| s * e)
            .collect()
    };
    let terminal = row(family.terminal_offset(y));
    let kernels = (1..=family.horizon)
        .map(|t| {
            (0..k)
                .flat_map(|xt| row(family.kernel_row_offset(t, y, xt)))
                .collect()
        })
        .collect();
    KernelEnvelopes {
        states: k,
        kernels,
        terminal,
    }
}
