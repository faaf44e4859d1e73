//! Dataset dictionary: `K` labeled atoms plus this client's barycentric
//! coordinates, and the local minibatch optimizer that fits them.
//!
//! The loss of a client is `W_c(Q, B(α; P))` between (a batch of) its data and
//! the barycenter of its atoms, or the feature-only `W₂` when the client is
//! unlabeled. Gradients follow the frozen-plan (envelope) treatment: the
//! barycenter plans `π_k` and the outer plan `γ` are solved once and held
//! fixed, so the barycenter is the linear map
//!
//! ```text
//! X_B = Σ_k α_k n_B π_k X_k        Y_B = Σ_k α_k n_B π_k Y_k
//! ```
//!
//! and the loss `Σ_ij γ_ij (|x_i − X_B,j|² + β |y_i − Y_B,j|²)` is a quadratic
//! whose derivatives in `X_k`, `Y_k` and `α` are exact.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::barycenter::{check_atoms, free_support_barycenter, BarycenterConfig, BarycenterInit};
use crate::ot::{cost_matrix, solve, Solver, TransportPlan};
use crate::simplex::{is_on_simplex, project_in_place};
use crate::{Error, LabeledDistribution, Result};

pub use crate::simplex::simplex_project;

pub const ALPHA_TOL: f64 = 1e-9;

/// `K` atoms sharing `(n, d, C)` and a point `α` of the `K`-simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    atoms: Vec<LabeledDistribution>,
    alpha: Vec<f64>,
}

impl Dictionary {
    pub fn new(atoms: Vec<LabeledDistribution>, alpha: Vec<f64>) -> Result<Self> {
        let (_, classes) = check_atoms(&atoms)?;
        if classes.is_none() {
            return Err(Error::InvalidArgument("dictionary atoms must be labeled".into()));
        }
        let n = atoms[0].n();
        if let Some(k) = atoms.iter().position(|a| a.n() != n) {
            return Err(Error::shape(
                format!("atom {k} sample count"),
                (atoms[k].n(), atoms[k].dim()),
                (n, atoms[0].dim()),
            ));
        }
        if alpha.len() != atoms.len() || !is_on_simplex(&alpha, ALPHA_TOL) {
            return Err(Error::InvalidArgument(format!(
                "alpha {alpha:?} is not a point of the {}-simplex",
                atoms.len()
            )));
        }
        Ok(Self { atoms, alpha })
    }

    pub fn k(&self) -> usize {
        self.atoms.len()
    }

    /// Samples per atom.
    pub fn n(&self) -> usize {
        self.atoms[0].n()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn n_classes(&self) -> usize {
        self.atoms[0].n_classes().expect("dictionary atoms are labeled")
    }

    pub fn atoms(&self) -> &[LabeledDistribution] {
        &self.atoms
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn into_atoms(self) -> Vec<LabeledDistribution> {
        self.atoms
    }

    /// Replaces the atoms, keeping `α`. Shapes must match the current atoms.
    pub fn set_atoms(&mut self, atoms: Vec<LabeledDistribution>) -> Result<()> {
        let fresh = Dictionary::new(atoms, self.alpha.clone())?;
        if (fresh.k(), fresh.n(), fresh.dim(), fresh.n_classes()) != (self.k(), self.n(), self.dim(), self.n_classes()) {
            return Err(Error::InvalidArgument(format!(
                "atom shape (K={}, n={}, d={}, C={}) does not match dictionary (K={}, n={}, d={}, C={})",
                fresh.k(),
                fresh.n(),
                fresh.dim(),
                fresh.n_classes(),
                self.k(),
                self.n(),
                self.dim(),
                self.n_classes()
            )));
        }
        self.atoms = fresh.atoms;
        Ok(())
    }

    /// The same points of every atom, with `α` unchanged.
    pub fn select_points(&self, indices: &[usize]) -> Dictionary {
        Dictionary {
            atoms: self.atoms.iter().map(|a| a.select(indices)).collect(),
            alpha: self.alpha.clone(),
        }
    }

    /// Barycenter plans and outer plan of a loss evaluation, plus the loss and
    /// its frozen-plan gradients.
    pub fn loss(
        &self,
        batch: &LabeledDistribution,
        labeled: bool,
        cfg: &OptimizerConfig,
        seed: u64,
    ) -> Result<LossOutput> {
        if batch.dim() != self.dim() {
            return Err(Error::shape("loss batch vs atoms", (batch.n(), batch.dim()), (self.n(), self.dim())));
        }
        if labeled && batch.n_classes() != Some(self.n_classes()) {
            return Err(Error::InvalidArgument(format!(
                "labeled loss needs a batch with {} classes, got {:?}",
                self.n_classes(),
                batch.n_classes()
            )));
        }
        let bary = free_support_barycenter(&self.atoms, &self.alpha, &cfg.barycenter_config(), seed)?;
        let frozen = bary.support_plans;
        let n_b = bary.distribution.n() as f64;

        let barycenter = compose_barycenter(&self.atoms, &self.alpha, &frozen);
        let (xb, yb) = (barycenter.features(), barycenter.labels().expect("atoms are labeled"));

        let beta = if labeled { cfg.label_weight } else { 0.0 };
        let target = if labeled { batch.clone() } else { batch.without_labels() };
        let outer = solve(&cost_matrix(&target, &barycenter, beta)?, &cfg.solver)?;
        let gamma = &outer.coupling;
        let value = outer.cost_value;

        // dL/dX_B and dL/dY_B.
        let mass = gamma.sum_axis(Axis(0)).insert_axis(Axis(1));
        let g_x = (&xb * &mass - gamma.t().dot(&batch.features())) * 2.0;
        let g_y = match (labeled, batch.labels()) {
            (true, Some(yq)) if beta > 0.0 => (&yb * &mass - gamma.t().dot(&yq)) * (2.0 * beta),
            _ => Array2::zeros(yb.raw_dim()),
        };

        let mut grads = Gradients {
            atoms_x: Vec::with_capacity(self.k()),
            atoms_y: Vec::with_capacity(self.k()),
            alpha: Vec::with_capacity(self.k()),
        };
        for ((atom, &a), plan) in self.atoms.iter().zip(&self.alpha).zip(&frozen) {
            let pt = plan.coupling.t();
            grads.atoms_x.push(pt.dot(&g_x) * (a * n_b));
            grads.atoms_y.push(pt.dot(&g_y) * (a * n_b));
            let mapped_x = plan.coupling.dot(&atom.features());
            let mapped_y = plan.coupling.dot(&atom.labels().expect("atoms are labeled"));
            let d_alpha = n_b * ((&g_x * &mapped_x).sum() + (&g_y * &mapped_y).sum());
            grads.alpha.push(d_alpha);
        }

        Ok(LossOutput {
            value,
            grads,
            plans: FrozenPlans {
                barycenter: frozen,
                outer,
            },
        })
    }
}

/// `Σ_k α_k n_B π_k (X_k, Y_k)` under fixed plans (labels not renormalized).
pub fn compose_barycenter(
    atoms: &[LabeledDistribution],
    alpha: &[f64],
    plans: &[TransportPlan],
) -> LabeledDistribution {
    let n_b = plans[0].dim().0;
    let mut x = Array2::<f64>::zeros((n_b, atoms[0].dim()));
    let mut y = atoms[0].n_classes().map(|c| Array2::<f64>::zeros((n_b, c)));
    for ((atom, &a), plan) in atoms.iter().zip(alpha).zip(plans) {
        x.scaled_add(a * n_b as f64, &plan.coupling.dot(&atom.features()));
        if let (Some(y), Some(ya)) = (y.as_mut(), atom.labels()) {
            y.scaled_add(a * n_b as f64, &plan.coupling.dot(&ya));
        }
    }
    LabeledDistribution::from_parts(x, y)
}

/// Gradient blocks, shaped like the parameters they differentiate.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub atoms_x: Vec<Array2<f64>>,
    pub atoms_y: Vec<Array2<f64>>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FrozenPlans {
    /// Barycenter-to-atom plans `π_k` (rows index barycenter supports).
    pub barycenter: Vec<TransportPlan>,
    /// Batch-to-barycenter plan `γ`.
    pub outer: TransportPlan,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Gradients,
    pub plans: FrozenPlans,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Class-stratified subsample of the local data plus Gaussian noise.
    DataSubsamplePerturbed { noise_std: f64 },
    /// Gaussian with the local data's per-feature mean and standard deviation.
    Gaussian,
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::DataSubsamplePerturbed { noise_std: 0.0 }
    }
}

/// Class layout shared by every initialization: point `i` of each atom
/// belongs to class `i mod C`, so atoms built by different clients line up
/// index by index.
fn layout_class(i: usize, n_classes: usize) -> usize {
    i % n_classes
}

fn one_hot_layout(n: usize, n_classes: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n_classes), |(i, c)| if layout_class(i, n_classes) == c { 1.0 } else { 0.0 })
}

/// Builds a client's starting dictionary; `α` is uniform.
pub fn init_dictionary(
    local_data: &LabeledDistribution,
    k: usize,
    n_atom: usize,
    n_classes: usize,
    seed: u64,
    strategy: InitStrategy,
) -> Result<Dictionary> {
    if k == 0 || n_atom == 0 || n_classes == 0 {
        return Err(Error::InvalidArgument(format!(
            "need K, n_atom, C >= 1, got K={k}, n_atom={n_atom}, C={n_classes}"
        )));
    }
    if let Some(c) = local_data.n_classes() {
        if c != n_classes {
            return Err(Error::InvalidArgument(format!("local data has {c} classes, expected {n_classes}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = local_data.dim();
    let atoms = match strategy {
        InitStrategy::DataSubsamplePerturbed { noise_std } => {
            if n_atom > local_data.n() {
                return Err(Error::InvalidArgument(format!(
                    "cannot subsample {n_atom} points from {} local samples",
                    local_data.n()
                )));
            }
            if !(noise_std >= 0.0) {
                return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {noise_std}")));
            }
            let noise = Normal::new(0.0, noise_std).expect("checked noise std");
            let hard = local_data.hard_labels();
            (0..k)
                .map(|_| {
                    let idx = stratified_subsample(hard.as_deref(), local_data.n(), n_atom, n_classes, &mut rng);
                    let mut x = local_data.features().select(Axis(0), &idx);
                    if noise_std > 0.0 {
                        x.mapv_inplace(|v| v + noise.sample(&mut rng));
                    }
                    let y = match local_data.labels() {
                        Some(y) => y.select(Axis(0), &idx),
                        None => one_hot_layout(n_atom, n_classes),
                    };
                    LabeledDistribution::from_parts(x, Some(y))
                })
                .collect()
        }
        InitStrategy::Gaussian => {
            let mean = local_data.features().mean_axis(Axis(0)).expect("n >= 1");
            let std = local_data.features().std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
            gaussian_atoms(k, n_atom, d, n_classes, &mean, &std, &mut rng)
        }
    };
    Dictionary::new(atoms, vec![1.0 / k as f64; k])
}

/// Atoms with supports drawn from `N(center, diag(scale²))` and the shared
/// one-hot class layout. Used where no local data is available (the server).
pub fn gaussian_atoms(
    k: usize,
    n_atom: usize,
    dim: usize,
    n_classes: usize,
    center: &Array1<f64>,
    scale: &Array1<f64>,
    rng: &mut impl Rng,
) -> Vec<LabeledDistribution> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..k)
        .map(|_| {
            let x = Array2::from_shape_fn((n_atom, dim), |(_, j)| center[j] + scale[j] * normal.sample(rng));
            LabeledDistribution::from_parts(x, Some(one_hot_layout(n_atom, n_classes)))
        })
        .collect()
}

/// Point `i` is drawn from class `i mod C` when labels are known and that
/// class is present; otherwise from the whole dataset. No index repeats
/// unless a class pool runs out.
fn stratified_subsample(
    hard: Option<&[usize]>,
    n_data: usize,
    n_atom: usize,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut everything: Vec<usize> = (0..n_data).collect();
    everything.shuffle(rng);
    let Some(hard) = hard else {
        return everything[..n_atom].to_vec();
    };
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in &everything {
        pools[hard[i]].push(i);
    }
    let mut taken = vec![false; n_data];
    let mut cursor = vec![0usize; n_classes];
    let mut spill = everything.iter().copied();
    (0..n_atom)
        .map(|i| {
            let pool = &pools[layout_class(i, n_classes)];
            let c = layout_class(i, n_classes);
            while cursor[c] < pool.len() && taken[pool[cursor[c]]] {
                cursor[c] += 1;
            }
            let pick = if cursor[c] < pool.len() {
                pool[cursor[c]]
            } else {
                spill.by_ref().find(|&j| !taken[j]).unwrap_or(everything[i % n_data])
            };
            taken[pick] = true;
            pick
        })
        .collect()
}

/// Local optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub label_weight: f64,
    pub barycenter_iters: usize,
    pub solver: Solver,
    /// The update returns its last iterate. Only `true` is supported.
    pub last_iterate: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            local_epochs: 1,
            batch_size: 32,
            label_weight: 1.0,
            barycenter_iters: 10,
            solver: Solver::default(),
            last_iterate: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.local_epochs == 0 || self.batch_size == 0 || self.barycenter_iters == 0 {
            return Err(Error::InvalidArgument(
                "local_epochs, batch_size and barycenter_iters must be >= 1".into(),
            ));
        }
        if !self.last_iterate {
            return Err(Error::InvalidArgument("only last_iterate = true is supported".into()));
        }
        if !(self.label_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!("label weight must be >= 0, got {}", self.label_weight)));
        }
        Ok(())
    }

    pub fn barycenter_config(&self) -> BarycenterConfig {
        BarycenterConfig {
            n_support: None,
            iters: self.barycenter_iters,
            init: BarycenterInit::FirstAtomSubsample,
            label_weight: self.label_weight,
            solver: self.solver,
        }
    }
}

/// Counters from one [`client_update`] call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub loss_evaluations: usize,
    pub commits: usize,
    pub batch_losses: Vec<f64>,
}

impl UpdateReport {
    pub fn mean_loss(&self) -> f64 {
        if self.batch_losses.is_empty() {
            return 0.0;
        }
        self.batch_losses.iter().sum::<f64>() / self.batch_losses.len() as f64
    }
}

/// `E` epochs of minibatch projected gradient descent on `(X, Y, α)`.
///
/// Each epoch reshuffles the atom indices and walks them in
/// `B = ⌈n/n_b⌉` aligned ranges; the matching data batch is the next slice of
/// an epoch-wise permutation of the local data (wrapping around). Unlabeled
/// clients never touch atom labels.
pub fn client_update(
    dict: &Dictionary,
    local_data: &LabeledDistribution,
    labeled: bool,
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<(Dictionary, UpdateReport)> {
    cfg.validate()?;
    let n = dict.n();
    if cfg.batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds atom size {n}",
            cfg.batch_size
        )));
    }
    if labeled && local_data.n_classes() != Some(dict.n_classes()) {
        return Err(Error::InvalidArgument("labeled client update needs labels matching the atoms".into()));
    }
    let nb = cfg.batch_size;
    let n_batches = n.div_ceil(nb);
    let eta = cfg.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = dict.clone();
    let mut report = UpdateReport::default();

    for _ in 0..cfg.local_epochs {
        let mut atom_order: Vec<usize> = (0..n).collect();
        atom_order.shuffle(&mut rng);
        let mut data_order: Vec<usize> = (0..local_data.n()).collect();
        data_order.shuffle(&mut rng);
        let mut data_cursor = 0;

        for b in 0..n_batches {
            let idx = &atom_order[b * nb..((b + 1) * nb).min(n)];
            let data_idx: Vec<usize> = (0..idx.len())
                .map(|t| data_order[(data_cursor + t) % data_order.len()])
                .collect();
            data_cursor += idx.len();
            let batch = local_data.select(&data_idx);

            let out = current.select_points(idx).loss(&batch, labeled, cfg, rng.next_u64())?;
            report.loss_evaluations += 1;
            report.batch_losses.push(out.value);
            let finite = out.value.is_finite()
                && out.grads.alpha.iter().all(|g| g.is_finite())
                && out.grads.atoms_x.iter().all(|g| g.iter().all(|v| v.is_finite()))
                && out.grads.atoms_y.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::Solver("client update produced a non-finite loss or gradient".into()));
            }

            for (k, atom) in current.atoms.iter_mut().enumerate() {
                let x = atom.features_mut();
                for (t, &i) in idx.iter().enumerate() {
                    x.row_mut(i).scaled_add(-eta, &out.grads.atoms_x[k].row(t));
                }
                if labeled {
                    let y = atom.labels_mut().expect("atoms are labeled");
                    for (t, &i) in idx.iter().enumerate() {
                        y.row_mut(i).scaled_add(-eta, &out.grads.atoms_y[k].row(t));
                        project_in_place(y.row_mut(i));
                    }
                }
            }
            let stepped: Vec<f64> = current
                .alpha
                .iter()
                .zip(&out.grads.alpha)
                .map(|(a, g)| a - eta * g)
                .collect();
            current.alpha = simplex_project(&stepped);
            report.commits += 1;
        }
    }
    if current.atoms.iter().any(|a| a.features().iter().any(|v| !v.is_finite())) {
        return Err(Error::Solver("client update produced non-finite atom supports".into()));
    }
    Ok((current, report))
}
