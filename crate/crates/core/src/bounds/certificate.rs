use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ssm::{softmax_row_extremes, FiniteSSM, ModelFamily, ModelShape, TableKind};
use crate::variational::{VariationalFamily, VariationalLaw};

/// Entrywise infimum and supremum of the model tables over a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    pub states: usize,
    pub symbols: usize,
    pub trans_inf: Vec<f64>,
    pub trans_sup: Vec<f64>,
    /// Row-major `[x * V + y]`.
    pub emit_inf: Vec<f64>,
    pub emit_sup: Vec<f64>,
    pub init_inf: Vec<f64>,
    pub init_sup: Vec<f64>,
}

impl ModelBounds {
    pub fn from_family(family: &ModelFamily) -> Self {
        let (k, v) = (family.shape.states, family.shape.symbols);
        let b = &family.bounds;
        let mut out = Self {
            states: k,
            symbols: v,
            trans_inf: vec![0.0; k * k],
            trans_sup: vec![0.0; k * k],
            emit_inf: vec![0.0; k * v],
            emit_sup: vec![0.0; k * v],
            init_inf: vec![0.0; k],
            init_sup: vec![0.0; k],
        };
        for (kind, row, o, width) in family.shape.rows() {
            let (inf, sup) =
                softmax_row_extremes(&b.lower[o..o + width - 1], &b.upper[o..o + width - 1]);
            let (dst_inf, dst_sup) = match kind {
                TableKind::Transition => (
                    &mut out.trans_inf[row * k..(row + 1) * k],
                    &mut out.trans_sup[row * k..(row + 1) * k],
                ),
                TableKind::Emission => (
                    &mut out.emit_inf[row * v..(row + 1) * v],
                    &mut out.emit_sup[row * v..(row + 1) * v],
                ),
                TableKind::Initial => (&mut out.init_inf[..], &mut out.init_sup[..]),
            };
            dst_inf.copy_from_slice(&inf);
            dst_sup.copy_from_slice(&sup);
        }
        out
    }

    /// Bounds of a single model: the tables themselves.
    pub fn from_model(model: &FiniteSSM) -> Self {
        Self {
            states: model.states(),
            symbols: model.symbols(),
            trans_inf: model.transition().to_vec(),
            trans_sup: model.transition().to_vec(),
            emit_inf: model.emission().to_vec(),
            emit_sup: model.emission().to_vec(),
            init_inf: model.initial().to_vec(),
            init_sup: model.initial().to_vec(),
        }
    }

    /// `ḡ^y(x)`.
    pub fn gbar(&self, y: usize, x: usize) -> f64 {
        self.emit_sup[x * self.symbols + y]
    }

    /// `g̲^y(x)`.
    pub fn gunder(&self, y: usize, x: usize) -> f64 {
        self.emit_inf[x * self.symbols + y]
    }
}

/// Entrywise bounds of the variational tables used by one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBounds {
    pub states: usize,
    pub kernel_inf: Vec<Vec<f64>>,
    pub kernel_sup: Vec<Vec<f64>>,
    pub terminal_inf: Vec<f64>,
    pub terminal_sup: Vec<f64>,
}

impl KernelBounds {
    pub fn from_family(family: &VariationalFamily, y: &[usize]) -> Self {
        if !family.is_tabular() {
            return Self::from_model_backward(family, y);
        }
        let k = family.states;
        let b = &family.bounds;
        let s = family.scale();
        let row = |o: usize| {
            let (inf, sup) = softmax_row_extremes(&b.lower[o..o + k - 1], &b.upper[o..o + k - 1]);
            let f = |p: f64| family.floor + s * p;
            (
                inf.into_iter().map(f).collect::<Vec<_>>(),
                sup.into_iter().map(f).collect::<Vec<_>>(),
            )
        };
        let (terminal_inf, terminal_sup) = row(family.terminal_offset(y));
        let mut kernel_inf = Vec::with_capacity(family.horizon);
        let mut kernel_sup = Vec::with_capacity(family.horizon);
        for t in 1..=family.horizon {
            let mut lo = Vec::with_capacity(k * k);
            let mut hi = Vec::with_capacity(k * k);
            for xt in 0..k {
                let (a, b) = row(family.kernel_row_offset(t, y, xt));
                lo.extend(a);
                hi.extend(b);
            }
            kernel_inf.push(lo);
            kernel_sup.push(hi);
        }
        Self {
            states: k,
            kernel_inf,
            kernel_sup,
            terminal_inf,
            terminal_sup,
        }
    }

    /// Tables of a model-backward family are filters and backward kernels of
    /// models in the `φ` box, bounded through the mixing constants of that
    /// box: `Φ ≥ (σ_-/σ_+) g / (K c_+)` and `b ≥ (σ_-/σ_+)² g / (K c_+)`,
    /// with the reciprocal upper bounds.
    fn from_model_backward(family: &VariationalFamily, y: &[usize]) -> Self {
        let k = family.states;
        let shape = ModelShape {
            states: k,
            symbols: family.symbols,
        };
        let phi_family = ModelFamily {
            shape,
            bounds: family.bounds.clone(),
        };
        let f = |p: f64| family.floor + family.scale() * p;
        let Ok(cert) = certify_mixing(&ModelBounds::from_family(&phi_family)) else {
            return Self {
                states: k,
                kernel_inf: vec![vec![f(0.0); k * k]; family.horizon],
                kernel_sup: vec![vec![f(1.0); k * k]; family.horizon],
                terminal_inf: vec![f(0.0); k],
                terminal_sup: vec![f(1.0); k],
            };
        };
        let (sa_m, sa_p) = cert.pointwise_sigma();
        let r = sa_m / sa_p;
        let bound = |a: usize, x: usize, power: i32| {
            let (ca_m, ca_p) = cert.pointwise_c(a);
            let rp = crate::math::powi(r, power);
            (
                f(rp * cert.gunder(a, x) / ca_p),
                f((cert.gbar(a, x) / (rp * ca_m)).min(1.0)),
            )
        };
        let big_t = family.horizon;
        let (terminal_inf, terminal_sup) = (0..k).map(|x| bound(y[big_t], x, 1)).unzip();
        let mut kernel_inf = Vec::with_capacity(big_t);
        let mut kernel_sup = Vec::with_capacity(big_t);
        for t in 1..=big_t {
            let (lo, hi): (Vec<f64>, Vec<f64>) =
                (0..k * k).map(|i| bound(y[t - 1], i % k, 2)).unzip();
            kernel_inf.push(lo);
            kernel_sup.push(hi);
        }
        Self {
            states: k,
            kernel_inf,
            kernel_sup,
            terminal_inf,
            terminal_sup,
        }
    }

    pub fn from_law(law: &VariationalLaw) -> Self {
        Self {
            states: law.states,
            kernel_inf: law.kernels.clone(),
            kernel_sup: law.kernels.clone(),
            terminal_inf: law.terminal.clone(),
            terminal_sup: law.terminal.clone(),
        }
    }
}

/// A zero (or missing) entry that breaks a positivity requirement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityViolation {
    pub table: alloc::string::String,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Model-side constants with uniform reference measures `η± = λ±`.
///
/// All constants follow the convention where densities are taken against
/// the uniform law, so `σ_- = K min m`, `c_-(y) = K^{-1} Σ_x g̲^y(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingCertificate {
    pub states: usize,
    pub symbols: usize,
    pub sigma_minus: f64,
    pub sigma_plus: f64,
    pub epsilon: f64,
    pub c_minus: Vec<f64>,
    pub c_plus: Vec<f64>,
    /// `[y * K + x]`.
    pub gbar: Vec<f64>,
    pub gunder: Vec<f64>,
}

impl MixingCertificate {
    pub fn gbar(&self, y: usize, x: usize) -> f64 {
        self.gbar[y * self.states + x]
    }

    pub fn gunder(&self, y: usize, x: usize) -> f64 {
        self.gunder[y * self.states + x]
    }

    /// `inf_x g̲^y(x)`.
    pub fn gunder_min(&self, y: usize) -> f64 {
        (0..self.states)
            .map(|x| self.gunder(y, x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Pointwise bounds on the transition density: `σ_-/K`, `σ_+/K`.
    pub fn pointwise_sigma(&self) -> (f64, f64) {
        let k = self.states as f64;
        (self.sigma_minus / k, self.sigma_plus / k)
    }

    /// `Σ_x g̲^y(x)` and `Σ_x ḡ^y(x)`.
    pub fn pointwise_c(&self, y: usize) -> (f64, f64) {
        let k = self.states as f64;
        (k * self.c_minus[y], k * self.c_plus[y])
    }
}

pub fn certify_mixing(bounds: &ModelBounds) -> Result<MixingCertificate, PositivityViolation> {
    let (k, v) = (bounds.states, bounds.symbols);
    let kf = k as f64;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for x in 0..k {
        for xn in 0..k {
            let p = bounds.trans_inf[x * k + xn];
            if !(p > 0.0) {
                return Err(PositivityViolation {
                    table: "transition".into(),
                    row: x,
                    col: xn,
                    value: p,
                });
            }
            lo = lo.min(p);
            hi = hi.max(bounds.trans_sup[x * k + xn]);
        }
        let p = bounds.init_inf[x];
        if !(p > 0.0) {
            return Err(PositivityViolation {
                table: "initial".into(),
                row: 0,
                col: x,
                value: p,
            });
        }
        lo = lo.min(p);
        hi = hi.max(bounds.init_sup[x]);
    }
    let mut gbar = vec![0.0; v * k];
    let mut gunder = vec![0.0; v * k];
    let mut c_minus = vec![0.0; v];
    let mut c_plus = vec![0.0; v];
    for y in 0..v {
        for x in 0..k {
            gbar[y * k + x] = bounds.gbar(y, x);
            gunder[y * k + x] = bounds.gunder(y, x);
        }
        c_minus[y] = gunder[y * k..(y + 1) * k].iter().sum::<f64>() / kf;
        c_plus[y] = gbar[y * k..(y + 1) * k].iter().sum::<f64>() / kf;
        if !(c_minus[y] > 0.0) {
            return Err(PositivityViolation {
                table: "emission".into(),
                row: 0,
                col: y,
                value: c_minus[y],
            });
        }
    }
    let sigma_minus = kf * lo;
    let sigma_plus = kf * hi;
    Ok(MixingCertificate {
        states: k,
        symbols: v,
        sigma_minus,
        sigma_plus,
        epsilon: 1.0 - sigma_minus / sigma_plus,
        c_minus,
        c_plus,
        gbar,
        gunder,
    })
}

/// Variational constants `ϑ±(y)` and `ρ(y) = 1 - ϑ_-(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationalCertificate {
    pub theta_minus: f64,
    pub theta_plus: f64,
    pub rho: f64,
}

impl VariationalCertificate {
    pub fn pointwise(&self, states: usize) -> (f64, f64) {
        let k = states as f64;
        (self.theta_minus / k, self.theta_plus / k)
    }
}

pub fn certify_variational(
    bounds: &KernelBounds,
) -> Result<VariationalCertificate, PositivityViolation> {
    let k = bounds.states;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for (t, (inf, sup)) in bounds.kernel_inf.iter().zip(&bounds.kernel_sup).enumerate() {
        for (i, (&a, &b)) in inf.iter().zip(sup).enumerate() {
            if !(a > 0.0) {
                return Err(PositivityViolation {
                    table: alloc::format!("kernel {}", t + 1),
                    row: i / k,
                    col: i % k,
                    value: a,
                });
            }
            lo = lo.min(a);
            hi = hi.max(b);
        }
    }
    for (x, (&a, &b)) in bounds
        .terminal_inf
        .iter()
        .zip(&bounds.terminal_sup)
        .enumerate()
    {
        if !(a > 0.0) {
            return Err(PositivityViolation {
                table: "terminal".into(),
                row: 0,
                col: x,
                value: a,
            });
        }
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let kf = k as f64;
    Ok(VariationalCertificate {
        theta_minus: kf * lo,
        theta_plus: kf * hi,
        rho: 1.0 - kf * lo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(transition: [f64; 4]) -> FiniteSSM {
        FiniteSSM::from_tables(
            2,
            2,
            transition.to_vec(),
            vec![0.7, 0.3, 0.4, 0.6],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn uniform_transition_has_no_mixing_gap() {
        let c = certify_mixing(&ModelBounds::from_model(&model([0.5; 4]))).unwrap();
        assert_eq!((c.sigma_minus, c.sigma_plus, c.epsilon), (1.0, 1.0, 0.0));
    }

    #[test]
    fn direct_min_max() {
        let c = certify_mixing(&ModelBounds::from_model(&model([0.9, 0.1, 0.2, 0.8]))).unwrap();
        assert!((c.sigma_minus - 0.2).abs() < 1e-15);
        assert!((c.sigma_plus - 1.8).abs() < 1e-15);
        assert!((c.epsilon - (1.0 - 1.0 / 9.0)).abs() < 1e-15);
        assert!(c.c_minus.iter().zip(&c.c_plus).all(|(a, b)| a <= b));
    }

    #[test]
    fn zero_entry_is_reported() {
        let v = certify_mixing(&ModelBounds::from_model(&model([1.0, 0.0, 0.2, 0.8]))).unwrap_err();
        assert_eq!((v.table.as_str(), v.row, v.col), ("transition", 0, 1));
    }

    #[test]
    fn family_bounds_contain_member_tables() {
        use crate::rng::rng_from_seed;
        use crate::ssm::{ModelShape, ParamBox};
        let shape = ModelShape::new(3, 2).unwrap();
        let mut rng = rng_from_seed(1);
        let center = ParamBox::symmetric(shape.param_dim(), 1.0).sample(&mut rng);
        let fam = ModelFamily::new(shape, ParamBox::around(&center, 0.3, 10.0)).unwrap();
        let b = ModelBounds::from_family(&fam);
        for _ in 0..200 {
            let m = fam.model(&fam.bounds.sample(&mut rng)).unwrap();
            for i in 0..9 {
                assert!(b.trans_inf[i] <= m.transition()[i] && m.transition()[i] <= b.trans_sup[i]);
            }
            for i in 0..6 {
                assert!(b.emit_inf[i] <= m.emission()[i] && m.emission()[i] <= b.emit_sup[i]);
            }
        }
    }

    #[test]
    fn model_backward_bounds_contain_the_law() {
        use crate::rng::rng_from_seed;
        use crate::ssm::ParamBox;
        use crate::variational::ContextMode;
        let mut rng = rng_from_seed(21);
        for trial in 0..200 {
            let (k, v) = (1 + trial % 3, 1 + trial % 2);
            let fam = VariationalFamily::new(k, v, 3, ContextMode::ModelBackward, 0.01, 2.0, 1000)
                .unwrap();
            let phi = ParamBox::symmetric(fam.dim(), 2.0).sample(&mut rng);
            let y: Vec<usize> = (0..4).map(|i| (i * 7 + trial) % v).collect();
            let q = fam.law(&phi, &y).unwrap();
            let kb = KernelBounds::from_family(&fam, &y);
            let tol = 1e-12;
            for x in 0..k {
                assert!(kb.terminal_inf[x] <= q.terminal[x] + tol);
                assert!(q.terminal[x] <= kb.terminal_sup[x] + tol);
            }
            for t in 1..=3 {
                for xt in 0..k {
                    for (xp, &p) in q.kernel_row(t, xt).iter().enumerate() {
                        let i = xt * k + xp;
                        assert!(kb.kernel_inf[t - 1][i] <= p + tol, "{trial}");
                        assert!(p <= kb.kernel_sup[t - 1][i] + tol, "{trial}");
                    }
                }
            }
        }
    }
}
