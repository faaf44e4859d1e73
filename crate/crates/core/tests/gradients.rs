//! Frozen-plan gradients against central finite differences, and the descent
//! behaviour of the local update.

use dadil::dictionary::{client_update, init_dictionary, Dictionary, FrozenPlans, InitStrategy, OptimizerConfig};
use dadil::ot::Solver;
use dadil::LabeledDistribution;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

/// Parameters of the surrogate, flattened out of the dictionary.
#[derive(Clone)]
struct Params {
    xs: Vec<Array2<f64>>,
    ys: Vec<Array2<f64>>,
    alpha: Vec<f64>,
}

/// `Σ_ij γ_ij (|q_i − b_j|² + β|y_i − c_j|²)` with
/// `b_j = Σ_k α_k n_B Σ_l π_k[j,l] X_k[l]` (and likewise `c_j` from `Y_k`),
/// evaluated with plain loops.
fn surrogate(p: &Params, plans: &FrozenPlans, batch: &LabeledDistribution, beta: f64) -> f64 {
    let n_b = plans.barycenter[0].coupling.nrows();
    let d = p.xs[0].ncols();
    let c = p.ys[0].ncols();
    let mut bx = vec![vec![0.0; d]; n_b];
    let mut by = vec![vec![0.0; c]; n_b];
    for k in 0..p.xs.len() {
        let pi = &plans.barycenter[k].coupling;
        for j in 0..n_b {
            for l in 0..pi.ncols() {
                let w = p.alpha[k] * n_b as f64 * pi[[j, l]];
                for t in 0..d {
                    bx[j][t] += w * p.xs[k][[l, t]];
                }
                for t in 0..c {
                    by[j][t] += w * p.ys[k][[l, t]];
                }
            }
        }
    }
    let gamma = &plans.outer.coupling;
    let q = batch.features();
    let mut total = 0.0;
    for i in 0..gamma.nrows() {
        for j in 0..n_b {
            let mut cost = 0.0;
            for t in 0..d {
                cost += (q[[i, t]] - bx[j][t]).powi(2);
            }
            if let Some(yq) = batch.labels() {
                for t in 0..c {
                    cost += beta * (yq[[i, t]] - by[j][t]).powi(2);
                }
            }
            total += gamma[[i, j]] * cost;
        }
    }
    total
}

fn central_difference(f: impl Fn(f64) -> f64) -> f64 {
    (f(FD_STEP) - f(-FD_STEP)) / (2.0 * FD_STEP)
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

fn seeded_instance(seed: u64) -> (Dictionary, LabeledDistribution, bool, OptimizerConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=3);
    let n = rng.random_range(4..=10);
    let d = rng.random_range(1..=3);
    let c = 3;
    let labeled = seed % 3 != 0;
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
    let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let data = LabeledDistribution::with_class_indices(x, &classes, c).unwrap();
    let mut dict = init_dictionary(&data, k, n, c, seed, InitStrategy::Gaussian).unwrap();
    // Move off the uniform weights and give the atoms soft labels.
    let alpha = dadil::simplex::simplex_project(&(0..k).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
    let atoms = dict
        .atoms()
        .iter()
        .map(|a| {
            let y = Array2::from_shape_fn((n, c), |_| rng.random::<f64>() + 0.05);
            let y = &y / &y.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
            LabeledDistribution::new(a.features().to_owned(), Some(y)).unwrap()
        })
        .collect();
    dict = Dictionary::new(atoms, alpha).unwrap();
    let batch = if labeled { data } else { data.without_labels() };
    let cfg = OptimizerConfig {
        solver: Solver::Exact,
        barycenter_iters: 4,
        label_weight: 1.5,
        ..Default::default()
    };
    (dict, batch, labeled, cfg)
}

#[test]
fn frozen_plan_gradients_match_finite_differences() {
    for seed in 0..10 {
        let (dict, batch, labeled, cfg) = seeded_instance(seed);
        let out = dict.loss(&batch, labeled, &cfg, seed).unwrap();
        let beta = if labeled { cfg.label_weight } else { 0.0 };
        let base = Params {
            xs: dict.atoms().iter().map(|a| a.features().to_owned()).collect(),
            ys: dict.atoms().iter().map(|a| a.labels().unwrap().to_owned()).collect(),
            alpha: dict.alpha().to_vec(),
        };
        let value = surrogate(&base, &out.plans, &batch, beta);
        assert!((value - out.value).abs() < 1e-9 * value.max(1.0), "seed {seed}: {value} vs {}", out.value);

        for k in 0..dict.k() {
            let mut fd_x = Vec::new();
            for idx in 0..base.xs[k].len() {
                fd_x.push(central_difference(|h| {
                    let mut p = base.clone();
                    p.xs[k].as_slice_mut().unwrap()[idx] += h;
                    surrogate(&p, &out.plans, &batch, beta)
                }));
            }
            let err = rel_err(out.grads.atoms_x[k].as_slice().unwrap(), &fd_x);
            assert!(err < REL_TOL, "seed {seed}, atom {k} supports: rel err {err}");

            let mut fd_y = Vec::new();
            for idx in 0..base.ys[k].len() {
                fd_y.push(central_difference(|h| {
                    let mut p = base.clone();
                    p.ys[k].as_slice_mut().unwrap()[idx] += h;
                    surrogate(&p, &out.plans, &batch, beta)
                }));
            }
            if labeled {
                let err = rel_err(out.grads.atoms_y[k].as_slice().unwrap(), &fd_y);
                assert!(err < REL_TOL, "seed {seed}, atom {k} labels: rel err {err}");
            } else {
                assert!(out.grads.atoms_y[k].iter().all(|&g| g == 0.0));
                assert!(fd_y.iter().all(|g| g.abs() < 1e-9));
            }
        }

        let fd_alpha: Vec<f64> = (0..dict.k())
            .map(|k| {
                central_difference(|h| {
                    let mut p = base.clone();
                    p.alpha[k] += h;
                    surrogate(&p, &out.plans, &batch, beta)
                })
            })
            .collect();
        let err = rel_err(&out.grads.alpha, &fd_alpha);
        assert!(err < REL_TOL, "seed {seed}, alpha: rel err {err}");
    }
}

#[test]
fn full_batch_descent_lowers_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 8;
    let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
    let classes: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let data = LabeledDistribution::with_class_indices(x, &classes, 2).unwrap();
    let mut dict = init_dictionary(&data, 2, n, 2, 3, InitStrategy::Gaussian).unwrap();
    let cfg = OptimizerConfig {
        learning_rate: 1e-3,
        local_epochs: 1,
        batch_size: n,
        solver: Solver::Exact,
        barycenter_iters: 5,
        ..Default::default()
    };
    let full_loss = |d: &Dictionary| d.loss(&data, true, &cfg, 0).unwrap().value;
    let initial = full_loss(&dict);
    let mut endpoints = vec![initial];
    for epoch in 0..20 {
        dict = client_update(&dict, &data, true, &cfg, epoch).unwrap().0;
        endpoints.push(full_loss(&dict));
    }
    let last = *endpoints.last().unwrap();
    assert!(last <= initial, "{endpoints:?}");
    let rises = endpoints.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    assert!(rises <= 2, "{endpoints:?}");
}
