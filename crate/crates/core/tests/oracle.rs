//! Path-enumeration oracles for the recursive algorithms.

use proptest::prelude::*;
use ssvae_core::inference::{enumerate_posterior, filter_forward, smoothing_from_backward};
use ssvae_core::optim::{central_difference, Objective};
use ssvae_core::rng::rng_from_seed;
use ssvae_core::ssm::{
    build_finite_ssm, exact_sequence_law, FiniteSSM, ModelFamily, ModelShape, ParamBox,
};
use ssvae_core::variational::{
    elbo, kl_backward_chain, ContextMode, LossObjective, VariationalFamily, VariationalLaw,
    WeightedSequence,
};

const CAP: usize = 1_000_000;

/// Every latent path of length `len` over `k` states.
fn all_paths(k: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out
}

/// Joint density read straight from the tables.
fn joint(m: &FiniteSSM, x: &[usize], y: &[usize]) -> f64 {
    let (k, v) = (m.states(), m.symbols());
    let mut p = m.initial()[x[0]] * m.emission()[x[0] * v + y[0]];
    for t in 1..x.len() {
        p *= m.transition()[x[t - 1] * k + x[t]] * m.emission()[x[t] * v + y[t]];
    }
    p
}

fn q_path(q: &VariationalLaw, x: &[usize]) -> f64 {
    let k = q.states;
    let big_t = x.len() - 1;
    let mut p = q.terminal[x[big_t]];
    for t in 1..=big_t {
        p *= q.kernels[t - 1][x[t] * k + x[t - 1]];
    }
    p
}

struct Instance {
    model: FiniteSSM,
    y: Vec<usize>,
    q: VariationalLaw,
}

fn random_instance(seed: u64) -> Instance {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let k = rng.random_range(1..=4usize);
    let v = rng.random_range(1..=3usize);
    let big_t = rng.random_range(0..=6usize);
    let shape = ModelShape::new(k, v).unwrap();
    let theta = ParamBox::symmetric(shape.param_dim(), 3.0).sample(&mut rng);
    let model = build_finite_ssm(&theta, k, v).unwrap();
    let (_, y) = model.sample_path(&mut rng, big_t);
    let fam = VariationalFamily::new(k, v, big_t, ContextMode::FullPrefix, 0.0, 3.0, CAP).unwrap();
    let phi = fam.bounds.sample(&mut rng);
    let q = fam.law(&phi, &y).unwrap();
    Instance { model, y, q }
}

#[test]
fn recursions_match_path_enumeration() {
    for seed in 0..200 {
        let Instance { model, y, q } = random_instance(seed);
        let k = model.states();
        let paths = all_paths(k, y.len());
        let weights: Vec<f64> = paths.iter().map(|x| joint(&model, x, &y)).collect();
        let z: f64 = weights.iter().sum();

        let inf = filter_forward(&model, &y).unwrap();
        assert!((inf.loglik - z.ln()).abs() <= 1e-10, "seed {seed}: loglik");

        let post = smoothing_from_backward(&inf, CAP).unwrap();
        for (x, w) in paths.iter().zip(&weights) {
            assert!(
                (post.prob(x) - w / z).abs() <= 1e-10,
                "seed {seed}: path {x:?}"
            );
        }

        let chain = kl_backward_chain(&q, &inf).unwrap();
        let direct: f64 = paths
            .iter()
            .zip(&weights)
            .map(|(x, w)| {
                let a = q_path(&q, x);
                if a > 0.0 {
                    a * (a / (w / z)).ln()
                } else {
                    0.0
                }
            })
            .sum();
        assert!(
            (chain.total - direct).abs() <= 1e-10,
            "seed {seed}: kl {} vs {direct}",
            chain.total
        );

        let e = elbo(&model, &q, &y).unwrap();
        assert!((e.elbo + e.kl - e.loglik).abs() <= 1e-10);
    }
}

/// Swapping a single row for the exact one lowers that step's term but moves
/// the marginals of every earlier step, so the total can go up.
#[test]
fn single_row_replacement_can_raise_total_kl() {
    let found = (0..2000u64).any(|seed| {
        let Instance { model, y, mut q } = random_instance(seed);
        let big_t = y.len() - 1;
        if big_t < 2 {
            return false;
        }
        let inf = filter_forward(&model, &y).unwrap();
        let k = model.states();
        let before = kl_backward_chain(&q, &inf).unwrap().total;
        (0..k).any(|xt| {
            let saved = q.kernels[big_t - 1].clone();
            q.kernels[big_t - 1][xt * k..(xt + 1) * k].copy_from_slice(inf.backward_row(big_t, xt));
            let after = kl_backward_chain(&q, &inf).unwrap().total;
            q.kernels[big_t - 1] = saved;
            after > before + 1e-9
        })
    });
    assert!(found);
}

#[test]
fn enumerated_normalizer_matches_forward_loglik() {
    for seed in 300..340 {
        let Instance { model, y, .. } = random_instance(seed);
        let post = enumerate_posterior(&model, &y, CAP).unwrap();
        let inf = filter_forward(&model, &y).unwrap();
        assert!((post.log_normalizer.unwrap() - inf.loglik).abs() <= 1e-10);
    }
}

#[test]
fn sequence_law_matches_double_enumeration() {
    let mut rng = rng_from_seed(77);
    let shape = ModelShape::new(3, 2).unwrap();
    let theta = ParamBox::symmetric(shape.param_dim(), 2.0).sample(&mut rng);
    let model = build_finite_ssm(&theta, 3, 2).unwrap();
    let law = exact_sequence_law(&model, 3, CAP).unwrap();
    assert!((law.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    let paths = all_paths(3, 4);
    for y in all_paths(2, 4) {
        let direct: f64 = paths.iter().map(|x| joint(&model, x, &y)).sum();
        assert!((law.prob(&y) - direct).abs() <= 1e-12);
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    use rand::Rng;
    let mut rng = rng_from_seed(2024);
    for point in 0..20 {
        let k = rng.random_range(2..=3usize);
        let v = rng.random_range(2..=3usize);
        let big_t = rng.random_range(0..=3usize);
        let mode = match point % 3 {
            0 => ContextMode::FullPrefix,
            1 => ContextMode::Window(1),
            _ => ContextMode::Shared,
        };
        let floor = if point % 2 == 0 { 0.0 } else { 0.02 };
        let shape = ModelShape::new(k, v).unwrap();
        let mf = ModelFamily::clipped(shape, 10.0);
        let qf = VariationalFamily::new(k, v, big_t, mode, floor, 10.0, CAP).unwrap();
        let truth =
            build_finite_ssm(&ParamBox::symmetric(mf.dim(), 1.5).sample(&mut rng), k, v).unwrap();
        let data: Vec<WeightedSequence> = (0..6)
            .map(|_| WeightedSequence {
                y: truth.sample_path(&mut rng, big_t).1,
                weight: 1.0 / 6.0,
                logp_data: -1.0,
            })
            .collect();
        let obj = LossObjective {
            model_family: &mf,
            q_family: &qf,
            data: &data,
        };
        let x: Vec<f64> = (0..obj.dim())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let mut g = vec![0.0; obj.dim()];
        obj.value_and_gradient(&x, &mut g);
        let mut fd = vec![0.0; obj.dim()];
        central_difference(|z| obj.value(z), &x, 1e-6, &mut fd);
        let scale = g.iter().map(|a| a.abs()).fold(0.0, f64::max).max(1e-3);
        for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
            assert!(
                (a - b).abs() <= 1e-4 * scale,
                "point {point} coord {i}: {a} vs {b}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chain_kl_is_nonnegative_and_rows_are_stochastic(seed in 0u64..1_000_000) {
        let Instance { model, y, q } = random_instance(seed);
        let inf = filter_forward(&model, &y).unwrap();
        for f in &inf.filters {
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        for b in &inf.backward {
            for row in b.chunks(model.states()) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        prop_assert!((inf.loglik - inf.step_logliks.iter().sum::<f64>()).abs() <= 1e-12);
        let chain = kl_backward_chain(&q, &inf).unwrap();
        prop_assert!(chain.total >= -1e-12);
    }

    #[test]
    fn exact_rows_below_a_replaced_row_never_increase_kl(seed in 0u64..1_000_000, pick in 0usize..64) {
        let Instance { model, y, mut q } = random_instance(seed);
        let inf = filter_forward(&model, &y).unwrap();
        let k = model.states();
        let big_t = y.len() - 1;
        if big_t == 0 {
            return Ok(());
        }
        let t = 1 + pick % big_t;
        for s in 1..t {
            q.kernels[s - 1] = inf.backward[s - 1].clone();
        }
        let before = kl_backward_chain(&q, &inf).unwrap().total;
        let xt = (pick / big_t) % k;
        q.kernels[t - 1][xt * k..(xt + 1) * k].copy_from_slice(inf.backward_row(t, xt));
        let after = kl_backward_chain(&q, &inf).unwrap().total;
        prop_assert!(after <= before + 1e-12);
    }

    #[test]
    fn sequence_law_sums_to_one(seed in 0u64..1_000_000) {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        let k = rng.random_range(1..=4usize);
        let v = rng.random_range(1..=3usize);
        let big_t = rng.random_range(0..=5usize);
        let shape = ModelShape::new(k, v).unwrap();
        let model = build_finite_ssm(&ParamBox::symmetric(shape.param_dim(), 4.0).sample(&mut rng), k, v).unwrap();
        let law = exact_sequence_law(&model, big_t, CAP).unwrap();
        prop_assert!((law.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }
}
