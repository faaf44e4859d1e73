//! Free-support Wasserstein barycenters `B(α; P) = argmin_B Σ_k α_k W_c(P_k, B)`.
//!
//! The solver is the usual fixed point for squared costs: transport the
//! current barycenter onto every atom, then move each support to the
//! `α`-weighted average of its barycentric projections. With exact plans the
//! objective is nonincreasing across iterations.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ot::{barycentric_projection, cost_matrix, solve, Solver, TransportPlan};
use crate::simplex::is_on_simplex;
use crate::{Error, LabeledDistribution, Result};

pub const WEIGHT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarycenterInit {
    /// Seeded subsample (without replacement, cycling if needed) of atom 0.
    #[default]
    FirstAtomSubsample,
    /// Each support picks an atom from `α`, then a uniform point of it.
    WeightedMixtureSample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarycenterConfig {
    /// Support size; `None` means the atoms' sample size.
    pub n_support: Option<usize>,
    pub iters: usize,
    pub init: BarycenterInit,
    pub label_weight: f64,
    pub solver: Solver,
}

impl Default for BarycenterConfig {
    fn default() -> Self {
        Self {
            n_support: None,
            iters: 10,
            init: BarycenterInit::FirstAtomSubsample,
            label_weight: 1.0,
            solver: Solver::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BarycenterResult {
    pub distribution: LabeledDistribution,
    /// Plans from the returned barycenter to each atom.
    pub plans: Vec<TransportPlan>,
    /// Plans the returned supports were averaged from (empty when `iters == 0`).
    pub support_plans: Vec<TransportPlan>,
    pub weights: Vec<f64>,
    pub iterations_run: usize,
    /// `Σ_k α_k W_c(P_k, B^(t))` for `t = 0..=iterations_run`.
    pub objective_trace: Vec<f64>,
}

impl BarycenterResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds at least the initial objective")
    }
}

/// Shape of a list of atoms: `(n, d, Some(C))` for labeled atoms.
pub(crate) fn check_atoms(atoms: &[LabeledDistribution]) -> Result<(usize, Option<usize>)> {
    let first = atoms
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty atom list".into()))?;
    let d = first.dim();
    let classes = first.n_classes();
    for (k, a) in atoms.iter().enumerate() {
        if a.dim() != d {
            return Err(Error::shape(format!("atom {k} feature dimension"), (a.n(), a.dim()), (first.n(), d)));
        }
        if a.n_classes() != classes {
            return Err(Error::InvalidArgument(format!(
                "atom {k} has {:?} classes, atom 0 has {classes:?}",
                a.n_classes()
            )));
        }
    }
    Ok((d, classes))
}

pub(crate) fn check_weights(weights: &[f64], k: usize) -> Result<()> {
    if weights.len() != k {
        return Err(Error::InvalidArgument(format!("{} weights for {k} atoms", weights.len())));
    }
    if !is_on_simplex(weights, WEIGHT_TOL) {
        return Err(Error::InvalidArgument(format!("weights {weights:?} are not on the simplex")));
    }
    Ok(())
}

fn initial_support(
    atoms: &[LabeledDistribution],
    weights: &[f64],
    n_support: usize,
    init: BarycenterInit,
    rng: &mut ChaCha8Rng,
) -> LabeledDistribution {
    match init {
        BarycenterInit::FirstAtomSubsample => {
            let atom = &atoms[0];
            let mut order: Vec<usize> = (0..atom.n()).collect();
            order.shuffle(rng);
            let idx: Vec<usize> = (0..n_support).map(|s| order[s % order.len()]).collect();
            atom.select(&idx)
        }
        BarycenterInit::WeightedMixtureSample => {
            let d = atoms[0].dim();
            let mut x = Array2::zeros((n_support, d));
            let mut y = atoms[0].n_classes().map(|c| Array2::zeros((n_support, c)));
            for s in 0..n_support {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = weights.len() - 1;
                for (j, &w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = j;
                        break;
                    }
                }
                // Zero-weight atoms are never picked.
                while weights[k] == 0.0 && k > 0 {
                    k -= 1;
                }
                let i = rng.random_range(0..atoms[k].n());
                x.row_mut(s).assign(&atoms[k].point(i));
                if let (Some(y), Some(src)) = (y.as_mut(), atoms[k].labels()) {
                    y.row_mut(s).assign(&src.row(i));
                }
            }
            LabeledDistribution::from_parts(x, y)
        }
    }
}

fn plans_to_atoms(
    support: &LabeledDistribution,
    atoms: &[LabeledDistribution],
    cfg: &BarycenterConfig,
) -> Result<Vec<TransportPlan>> {
    atoms
        .iter()
        .map(|atom| solve(&cost_matrix(support, atom, cfg.label_weight)?, &cfg.solver))
        .collect()
}

fn weighted_objective(plans: &[TransportPlan], weights: &[f64]) -> f64 {
    plans.iter().zip(weights).map(|(p, w)| w * p.cost_value).sum()
}

/// Fixed-point free-support barycenter; runs exactly `cfg.iters` updates.
pub fn free_support_barycenter(
    atoms: &[LabeledDistribution],
    weights: &[f64],
    cfg: &BarycenterConfig,
    seed: u64,
) -> Result<BarycenterResult> {
    let (d, classes) = check_atoms(atoms)?;
    check_weights(weights, atoms.len())?;
    let n_support = cfg.n_support.unwrap_or(atoms[0].n());
    if n_support == 0 {
        return Err(Error::InvalidArgument("barycenter needs at least one support".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = initial_support(atoms, weights, n_support, cfg.init, &mut rng);
    let mut plans = plans_to_atoms(&support, atoms, cfg)?;
    let mut trace = vec![weighted_objective(&plans, weights)];
    let mut support_plans = Vec::new();

    for _ in 0..cfg.iters {
        let mut x = Array2::<f64>::zeros((n_support, d));
        let mut y = classes.map(|c| Array2::<f64>::zeros((n_support, c)));
        // Fixed k order keeps the sum bitwise reproducible.
        for ((plan, atom), &w) in plans.iter().zip(atoms).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let (mx, my) = barycentric_projection(plan, atom)?;
            x.scaled_add(w, &mx);
            if let (Some(y), Some(my)) = (y.as_mut(), my) {
                y.scaled_add(w, &my);
            }
        }
        if let Some(y) = y.as_mut() {
            for mut row in y.outer_iter_mut() {
                let s = row.sum();
                row /= s;
            }
        }
        support = LabeledDistribution::from_parts(x, y);
        support_plans = std::mem::replace(&mut plans, plans_to_atoms(&support, atoms, cfg)?);
        trace.push(weighted_objective(&plans, weights));
    }

    Ok(BarycenterResult {
        distribution: support,
        plans,
        support_plans,
        weights: weights.to_vec(),
        iterations_run: cfg.iters,
        objective_trace: trace,
    })
}

/// One barycenter per grid weight, all from the same seed so that hulls built
/// by different clients are comparable entry by entry.
pub fn barycenter_hull(
    atoms: &[LabeledDistribution],
    weight_grid: &[Vec<f64>],
    cfg: &BarycenterConfig,
    seed: u64,
) -> Result<Vec<BarycenterResult>> {
    if weight_grid.is_empty() {
        return Err(Error::InvalidArgument("empty weight grid".into()));
    }
    weight_grid
        .iter()
        .map(|w| free_support_barycenter(atoms, w, cfg, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::wasserstein;
    use ndarray::array;

    fn exact(iters: usize) -> BarycenterConfig {
        BarycenterConfig {
            iters,
            solver: Solver::Exact,
            ..Default::default()
        }
    }

    fn seeded_atom(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> LabeledDistribution {
        let x = Array2::from_shape_fn((n, 2), |(_, j)| rng.random_range(-1.0..1.0) + shift * j as f64);
        let classes: Vec<usize> = (0..n).map(|i| i % 2).collect();
        LabeledDistribution::with_class_indices(x, &classes, 2).unwrap()
    }

    #[test]
    fn identical_atoms_give_that_atom() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let atom = seeded_atom(&mut rng, 6, 0.0);
        let atoms = vec![atom.clone(); 3];
        let r = free_support_barycenter(&atoms, &[0.2, 0.5, 0.3], &exact(5), 7).unwrap();
        assert!(r.objective() < 1e-6);
        assert!(wasserstein(&r.distribution, &atom, 1.0, &Solver::Exact).unwrap() < 1e-9);
    }

    #[test]
    fn one_hot_weights_recover_the_atom() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let atoms: Vec<_> = (0..3).map(|k| seeded_atom(&mut rng, 5, k as f64)).collect();
        for k in 0..3 {
            let mut w = vec![0.0; 3];
            w[k] = 1.0;
            let r = free_support_barycenter(&atoms, &w, &exact(3), 2).unwrap();
            assert!(r.objective() < 1e-6, "atom {k}: {}", r.objective());
            assert!(wasserstein(&r.distribution, &atoms[k], 1.0, &Solver::Exact).unwrap() < 1e-6);
        }
    }

    #[test]
    fn barycenter_of_two_diracs_is_the_midpoint() {
        let a = LabeledDistribution::unlabeled(array![[0.0]]).unwrap();
        let b = LabeledDistribution::unlabeled(array![[1.0]]).unwrap();
        for init in [BarycenterInit::FirstAtomSubsample, BarycenterInit::WeightedMixtureSample] {
            let cfg = BarycenterConfig { init, ..exact(1) };
            let r = free_support_barycenter(&[a.clone(), b.clone()], &[0.5, 0.5], &cfg, 0).unwrap();
            assert_eq!(r.distribution.features(), array![[0.5]]);
            assert!((r.objective() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for run in 0..10 {
            let atoms: Vec<_> = (0..3).map(|k| seeded_atom(&mut rng, 7, k as f64)).collect();
            let w = crate::simplex::simplex_project(&[rng.random(), rng.random(), rng.random()]);
            let init = if run % 2 == 0 {
                BarycenterInit::FirstAtomSubsample
            } else {
                BarycenterInit::WeightedMixtureSample
            };
            let r = free_support_barycenter(&atoms, &w, &BarycenterConfig { init, ..exact(8) }, run).unwrap();
            for t in r.objective_trace.windows(2) {
                assert!(t[1] <= t[0] + 1e-6, "{:?}", r.objective_trace);
            }
        }
    }

    #[test]
    fn permuting_atoms_and_weights_jointly_is_harmless() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let atoms: Vec<_> = (0..2).map(|k| seeded_atom(&mut rng, 1, 3.0 * k as f64)).collect();
        let r1 = free_support_barycenter(&atoms, &[0.3, 0.7], &exact(4), 0).unwrap();
        let swapped = vec![atoms[1].clone(), atoms[0].clone()];
        let r2 = free_support_barycenter(&swapped, &[0.7, 0.3], &exact(4), 0).unwrap();
        assert!(wasserstein(&r1.distribution, &r2.distribution, 1.0, &Solver::Exact).unwrap() < 1e-12);
    }

    #[test]
    fn hull_of_one_hot_grid_is_the_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let atoms: Vec<_> = (0..3).map(|k| seeded_atom(&mut rng, 4, k as f64)).collect();
        let grid = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let hull = barycenter_hull(&atoms, &grid, &exact(3), 11).unwrap();
        for (b, atom) in hull.iter().zip(&atoms) {
            assert!(wasserstein(&b.distribution, atom, 1.0, &Solver::Exact).unwrap() < 1e-6);
        }
        assert!(barycenter_hull(&atoms, &[], &exact(3), 0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = LabeledDistribution::unlabeled(array![[0.0]]).unwrap();
        assert!(free_support_barycenter(&[], &[], &exact(1), 0).is_err());
        assert!(free_support_barycenter(&[a.clone()], &[0.5, 0.5], &exact(1), 0).is_err());
        assert!(free_support_barycenter(&[a.clone(), a], &[0.7, 0.7], &exact(1), 0).is_err());
    }
}
