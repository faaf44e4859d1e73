//! Target accuracy and the cross-client consensus diagnostic.
//!
//! Consensus at a round is `max_w max_{i<j} W₂(B_i(w), B_j(w))`, where
//! `B_ℓ(w)` is client ℓ's feature-only barycenter at weight `w`. Values are
//! reported in squared-cost units.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{barycenter_hull, BarycenterConfig};
use crate::data::write_rows;
use crate::inference::Prediction;
use crate::ot::wasserstein;
use crate::protocol::Snapshot;
use crate::{Error, LabeledDistribution, Result};

/// Number of random Dirichlet(1) entries in [`weight_grid`].
pub const RANDOM_GRID_DRAWS: usize = 8;

/// Fraction of positions where the predicted class equals `truth`.
pub fn accuracy(pred: &Prediction, truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("accuracy prediction vs truth", (pred.len(), 1), (truth.len(), 1)));
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let hits = pred.hard_labels.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// The `K` vertices, the uniform weight, then seeded Dirichlet(1) draws.
pub fn weight_grid(k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut grid: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    grid.push(vec![1.0 / k as f64; k]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..RANDOM_GRID_DRAWS {
        let e: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = e.iter().sum();
        grid.push(e.iter().map(|v| v / s).collect());
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusCurve {
    pub rounds: Vec<usize>,
    pub values: Vec<f64>,
    pub weight_grid: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ConsensusCurve {
    /// `round,value`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = ["round".to_string(), "value".to_string()];
        write_rows(path.as_ref(), &header, self.rounds.len(), |i, row| {
            row.push(self.rounds[i].to_string());
            row.push(self.values[i].to_string());
        })
    }
}

/// Largest pairwise feature-only `W₂` between clients' barycenters at a
/// common grid weight.
pub fn consensus_value(
    client_atoms: &[Vec<LabeledDistribution>],
    grid: &[Vec<f64>],
    cfg: &BarycenterConfig,
    seed: u64,
) -> Result<f64> {
    if client_atoms.len() < 2 {
        return Err(Error::InvalidArgument("consensus needs at least 2 clients".into()));
    }
    let hulls = client_atoms
        .par_iter()
        .map(|atoms| {
            let features: Vec<_> = atoms.iter().map(LabeledDistribution::without_labels).collect();
            let hull = barycenter_hull(&features, grid, cfg, seed)?;
            Ok(hull.into_iter().map(|b| b.distribution).collect::<Vec<_>>())
        })
        .collect::<Vec<Result<Vec<_>>>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut worst = 0.0f64;
    for w in 0..grid.len() {
        for i in 0..hulls.len() {
            for j in i + 1..hulls.len() {
                worst = worst.max(wasserstein(&hulls[i][w], &hulls[j][w], 0.0, &cfg.solver)?);
            }
        }
    }
    Ok(worst)
}

/// One consensus value per snapshot.
pub fn consensus(
    snapshots: &[Snapshot],
    grid: &[Vec<f64>],
    cfg: &BarycenterConfig,
    seed: u64,
) -> Result<ConsensusCurve> {
    let values = snapshots
        .iter()
        .map(|s| consensus_value(&s.atoms, grid, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsensusCurve {
        rounds: snapshots.iter().map(|s| s.round).collect(),
        values,
        weight_grid: grid.to_vec(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{init_dictionary, InitStrategy};
    use crate::ot::Solver;
    use ndarray::{array, Array2};

    fn exact() -> BarycenterConfig {
        BarycenterConfig {
            solver: Solver::Exact,
            iters: 3,
            ..Default::default()
        }
    }

    fn pred(labels: &[usize]) -> Prediction {
        let mut scores = Array2::<f64>::zeros((labels.len(), 3));
        for (i, &c) in labels.iter().enumerate() {
            scores[[i, c]] = 1.0;
        }
        Prediction::from_scores(scores).unwrap()
    }

    fn atoms(seed: u64) -> Vec<LabeledDistribution> {
        let x = Array2::from_shape_fn((8, 2), |(i, j)| (i * 2 + j) as f64 * 0.3 + seed as f64);
        let classes: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let data = LabeledDistribution::with_class_indices(x, &classes, 2).unwrap();
        init_dictionary(&data, 2, 5, 2, seed, InitStrategy::Gaussian).unwrap().into_atoms()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&pred(&[0, 1, 2]), &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&pred(&[0, 1]), &[1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&pred(&[0, 1, 2, 2]), &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(accuracy(&pred(&[0]), &[0, 1]).is_err());
    }

    #[test]
    fn grid_layout() {
        let grid = weight_grid(3, 5);
        assert_eq!(grid.len(), 3 + 1 + RANDOM_GRID_DRAWS);
        assert_eq!(grid[1], vec![0.0, 1.0, 0.0]);
        assert_eq!(grid[3], vec![1.0 / 3.0; 3]);
        for w in &grid {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(grid, weight_grid(3, 5));
        assert_ne!(grid, weight_grid(3, 6));
    }

    #[test]
    fn identical_clients_agree() {
        let a = atoms(1);
        let v = consensus_value(&[a.clone(), a.clone(), a], &weight_grid(2, 0), &exact(), 3).unwrap();
        assert!(v.abs() < 1e-6, "{v}");
    }

    #[test]
    fn single_point_atoms() {
        let at = |x: f64| vec![LabeledDistribution::with_class_indices(array![[x]], &[0], 1).unwrap()];
        let v = consensus_value(&[at(0.0), at(3.0)], &weight_grid(1, 0), &exact(), 0).unwrap();
        assert!((v - 9.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn symmetric_under_client_relabeling() {
        let clients = vec![atoms(1), atoms(2), atoms(3)];
        let grid = weight_grid(2, 11);
        let v = consensus_value(&clients, &grid, &exact(), 4).unwrap();
        let reordered = vec![clients[2].clone(), clients[0].clone(), clients[1].clone()];
        assert_eq!(v, consensus_value(&reordered, &grid, &exact(), 4).unwrap());
        assert!(v > 0.0);
    }

    #[test]
    fn curve_rows_follow_snapshots() {
        let snap = Snapshot {
            round: 7,
            atoms: vec![atoms(1), atoms(1)],
        };
        let curve = consensus(&[snap], &weight_grid(2, 0), &exact(), 0).unwrap();
        assert_eq!(curve.rounds, vec![7]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        curve.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("round,value\n7,"));
        assert!(consensus_value(&[atoms(1)], &weight_grid(2, 0), &exact(), 0).is_err());
    }
}
