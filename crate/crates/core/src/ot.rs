//! Discrete optimal transport between uniform empirical measures.
//!
//! The ground cost is squared Euclidean on features plus a `β`-weighted
//! squared Euclidean term on label rows when both sides are labeled. Setting
//! `β = 0`, or dropping labels on either side, gives the plain `W₂²` cost.
//!
//! Two solvers are provided:
//!
//! - [`solve_exact`]: min-cost flow by successive shortest paths with Johnson
//!   potentials. For `n == m` every supply is one unit and this is the
//!   Hungarian method; otherwise row supply is `m/g` and column demand `n/g`
//!   units (`g = gcd(n, m)`), which keeps the flow integral and the marginals
//!   exact.
//! - [`solve_sinkhorn`]: entropic OT in the log domain, stable down to small
//!   regularization. The reported cost is the unregularized `⟨π, C⟩`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, LabeledDistribution, Result};

/// Pairwise ground costs and the label weight they were built with.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
    pub label_weight: f64,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Self {
        Self {
            values,
            label_weight: 0.0,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// A coupling with uniform marginals `1/n` (rows) and `1/m` (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    /// `⟨π, C⟩` against the cost the plan was solved for.
    pub cost_value: f64,
    /// Always true for the exact solver. False when Sinkhorn hit `max_iter`.
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn dim(&self) -> (usize, usize) {
        self.coupling.dim()
    }

    /// Largest absolute deviation of the row and column sums from `1/n`, `1/m`.
    pub fn marginal_error(&self) -> f64 {
        let (n, m) = self.coupling.dim();
        let rows = self
            .coupling
            .sum_axis(Axis(1))
            .iter()
            .map(|s| (s - 1.0 / n as f64).abs())
            .fold(0.0, f64::max);
        let cols = self
            .coupling
            .sum_axis(Axis(0))
            .iter()
            .map(|s| (s - 1.0 / m as f64).abs())
            .fold(0.0, f64::max);
        rows.max(cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub reg: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        Self {
            reg: 1e-2,
            max_iter: 10_000,
            tol: 1e-9,
        }
    }
}

/// Which OT solver to run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    Exact,
    Sinkhorn(SinkhornParams),
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Sinkhorn(SinkhornParams::default())
    }
}

fn check_same_dim(a: &LabeledDistribution, b: &LabeledDistribution) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape("cost matrix feature dimension", (a.n(), a.dim()), (b.n(), b.dim())));
    }
    Ok(())
}

/// `C_ij = ||x_i - x_j||² + β ||y_i - y_j||²`; the label term is dropped when
/// either side is unlabeled or `β == 0`.
pub fn cost_matrix(a: &LabeledDistribution, b: &LabeledDistribution, label_weight: f64) -> Result<CostMatrix> {
    check_same_dim(a, b)?;
    if !(label_weight >= 0.0 && label_weight.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "label weight must be finite and nonnegative, got {label_weight}"
        )));
    }
    let mut values = squared_distances(a.features(), b.features());
    if label_weight > 0.0 {
        if let (Some(ya), Some(yb)) = (a.labels(), b.labels()) {
            if ya.ncols() != yb.ncols() {
                return Err(Error::shape("cost matrix label classes", ya.dim(), yb.dim()));
            }
            values.scaled_add(label_weight, &squared_distances(ya, yb));
        }
    }
    Ok(CostMatrix { values, label_weight })
}

fn squared_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.nrows());
    // Direct differences rather than the |a|²+|b|²-2ab expansion: exact zeros
    // on coincident points matter for the identity tests downstream.
    Array2::from_shape_fn((n, m), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(u, v)| (u - v) * (u - v))
            .sum()
    })
}

pub fn solve(cost: &CostMatrix, solver: &Solver) -> Result<TransportPlan> {
    match solver {
        Solver::Exact => solve_exact(cost),
        Solver::Sinkhorn(p) => solve_sinkhorn(cost, p.reg, p.max_iter, p.tol),
    }
}

fn check_cost(cost: &CostMatrix) -> Result<(usize, usize)> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!("empty cost matrix {n}x{m}")));
    }
    if cost.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
    }
    Ok((n, m))
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact minimizer of `⟨π, C⟩` over the uniform-marginal transport polytope.
pub fn solve_exact(cost: &CostMatrix) -> Result<TransportPlan> {
    let (n, m) = check_cost(cost)?;
    let c = &cost.values;
    let g = gcd(n, m);
    let row_supply = (m / g) as u64;
    let col_demand = (n / g) as u64;
    let total = (n as u64) * row_supply;

    let mut flow = Array2::<u64>::zeros((n, m));
    let mut supply = vec![row_supply; n];
    let mut demand = vec![col_demand; m];
    // Reduced cost of i -> j is c_ij + pot_row[i] - pot_col[j] >= 0.
    let mut pot_row = vec![0.0f64; n];
    let mut pot_col = vec![0.0f64; m];

    let mut dist_row = vec![0.0f64; n];
    let mut dist_col = vec![0.0f64; m];
    let mut done_row = vec![false; n];
    let mut done_col = vec![false; m];
    let mut pred_col = vec![usize::MAX; m];
    let mut pred_row = vec![usize::MAX; n];

    let mut shipped = 0u64;
    let mut iterations = 0usize;
    while shipped < total {
        iterations += 1;
        for i in 0..n {
            dist_row[i] = if supply[i] > 0 { 0.0 } else { f64::INFINITY };
            done_row[i] = false;
            pred_row[i] = usize::MAX;
        }
        dist_col.fill(f64::INFINITY);
        done_col.fill(false);
        pred_col.fill(usize::MAX);

        let (sink, reach) = loop {
            // Dense Dijkstra: pick the closest unsettled node.
            let mut best = f64::INFINITY;
            let mut pick = None;
            for i in 0..n {
                if !done_row[i] && dist_row[i] < best {
                    best = dist_row[i];
                    pick = Some((true, i));
                }
            }
            for j in 0..m {
                if !done_col[j] && dist_col[j] < best {
                    best = dist_col[j];
                    pick = Some((false, j));
                }
            }
            let Some((is_row, v)) = pick else {
                return Err(Error::Solver("exact solver: no augmenting path".into()));
            };
            if is_row {
                done_row[v] = true;
                for j in 0..m {
                    if done_col[j] {
                        continue;
                    }
                    let nd = dist_row[v] + (c[[v, j]] + pot_row[v] - pot_col[j]).max(0.0);
                    if nd < dist_col[j] {
                        dist_col[j] = nd;
                        pred_col[j] = v;
                    }
                }
            } else {
                done_col[v] = true;
                if demand[v] > 0 {
                    break (v, best);
                }
                for i in 0..n {
                    if done_row[i] || flow[[i, v]] == 0 {
                        continue;
                    }
                    let nd = dist_col[v] + (-c[[i, v]] + pot_col[v] - pot_row[i]).max(0.0);
                    if nd < dist_row[i] {
                        dist_row[i] = nd;
                        pred_row[i] = v;
                    }
                }
            }
        };

        for i in 0..n {
            pot_row[i] += dist_row[i].min(reach);
        }
        for j in 0..m {
            pot_col[j] += dist_col[j].min(reach);
        }

        // Walk back to the source row and find the bottleneck.
        let mut delta = demand[sink];
        let mut j = sink;
        let source = loop {
            let i = pred_col[j];
            match pred_row[i] {
                usize::MAX => break i,
                prev => {
                    delta = delta.min(flow[[i, prev]]);
                    j = prev;
                }
            }
        };
        delta = delta.min(supply[source]);

        let mut j = sink;
        loop {
            let i = pred_col[j];
            flow[[i, j]] += delta;
            match pred_row[i] {
                usize::MAX => break,
                prev => {
                    flow[[i, prev]] -= delta;
                    j = prev;
                }
            }
        }
        supply[source] -= delta;
        demand[sink] -= delta;
        shipped += delta;
    }

    let scale = 1.0 / total as f64;
    let coupling = flow.mapv(|f| f as f64 * scale);
    let cost_value = inner(&coupling, c);
    Ok(TransportPlan {
        coupling,
        cost_value,
        converged: true,
        iterations,
    })
}

fn inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with ε-scaling.
///
/// The regularization is annealed geometrically from the cost scale down to
/// `reg`, warm-starting the dual potentials at each stage. Iteration stops when
/// the L1 row-marginal error drops below `tol`; `max_iter` bounds the total
/// number of iterations over all stages, and exhausting it sets
/// `converged = false`. The last iterate is then rounded onto the transport
/// polytope so the returned marginals are exact up to floating point.
pub fn solve_sinkhorn(cost: &CostMatrix, reg: f64, max_iter: usize, tol: f64) -> Result<TransportPlan> {
    let (n, m) = check_cost(cost)?;
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::InvalidArgument(format!("sinkhorn regularization must be positive, got {reg}")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("sinkhorn tolerance must be positive, got {tol}")));
    }
    let c = &cost.values;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);

    let mut schedule = Vec::new();
    let mut eps = c.iter().cloned().fold(0.0, f64::max);
    while eps > reg * SCALING_FACTOR {
        schedule.push(eps);
        eps /= SCALING_FACTOR;
    }
    schedule.push(reg);

    let budget = max_iter.max(1);
    let mut converged = false;
    let mut iterations = 0;
    for (stage, &eps) in schedule.iter().enumerate() {
        let last = stage + 1 == schedule.len();
        // Intermediate stages only need a rough warm start.
        let stage_tol = if last { tol } else { tol.max(1e-3) };
        let stage_cap = if last { budget } else { iterations + STAGE_ITERS };
        while iterations < stage_cap.min(budget) {
            iterations += 1;
            for i in 0..n {
                let row = c.row(i);
                f[i] = eps * log_a - eps * log_sum_exp((0..m).map(|j| (g[j] - row[j]) / eps));
            }
            for j in 0..m {
                let col = c.column(j);
                g[j] = eps * log_b - eps * log_sum_exp((0..n).map(|i| (f[i] - col[i]) / eps));
            }
            let err: f64 = (0..n)
                .map(|i| {
                    let row = c.row(i);
                    let s: f64 = (0..m).map(|j| ((f[i] + g[j] - row[j]) / eps).exp()).sum();
                    (s - 1.0 / n as f64).abs()
                })
                .sum();
            if err < stage_tol {
                converged = last;
                break;
            }
        }
    }

    let raw = Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / reg).exp());
    let coupling = round_to_polytope(raw);
    let cost_value = inner(&coupling, c);
    Ok(TransportPlan {
        coupling,
        cost_value,
        converged,
        iterations,
    })
}

const SCALING_FACTOR: f64 = 4.0;
const STAGE_ITERS: usize = 200;

/// Rounds a nonnegative matrix onto the uniform-marginal polytope: shrink
/// overfull rows, then overfull columns, then add the rank-one correction
/// `e_r e_cᵀ / |e_r|₁`.
fn round_to_polytope(mut plan: Array2<f64>) -> Array2<f64> {
    let (n, m) = plan.dim();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    for mut row in plan.outer_iter_mut() {
        let s = row.sum();
        if s > a {
            row *= a / s;
        }
    }
    for mut col in plan.axis_iter_mut(Axis(1)) {
        let s = col.sum();
        if s > b {
            col *= b / s;
        }
    }
    let err_r: Vec<f64> = plan.sum_axis(Axis(1)).iter().map(|s| (a - s).max(0.0)).collect();
    let err_c: Vec<f64> = plan.sum_axis(Axis(0)).iter().map(|s| (b - s).max(0.0)).collect();
    let mass: f64 = err_r.iter().sum();
    if mass > 0.0 {
        for i in 0..n {
            for j in 0..m {
                plan[[i, j]] += err_r[i] * err_c[j] / mass;
            }
        }
    }
    plan
}

/// Optimal transport cost between two empirical distributions under the
/// label-aware squared cost.
pub fn wasserstein(
    a: &LabeledDistribution,
    b: &LabeledDistribution,
    label_weight: f64,
    solver: &Solver,
) -> Result<f64> {
    let cost = cost_matrix(a, b, label_weight)?;
    Ok(solve(&cost, solver)?.cost_value)
}

/// Maps each source support to `n_src · Σ_j π_ij · target_j`, for features and
/// (if present) labels. Mapped label rows are renormalized to sum to one.
pub fn barycentric_projection(
    plan: &TransportPlan,
    target: &LabeledDistribution,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let (n_src, m) = plan.dim();
    if m != target.n() {
        return Err(Error::shape("barycentric projection plan vs target", plan.dim(), (target.n(), target.dim())));
    }
    let scale = n_src as f64;
    let mut features = plan.coupling.dot(&target.features());
    features *= scale;
    let labels = target.labels().map(|y| {
        let mut mapped = plan.coupling.dot(&y);
        for mut row in mapped.outer_iter_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        mapped
    });
    Ok((features, labels))
}
