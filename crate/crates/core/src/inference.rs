//! Target label prediction from a trained dictionary.
//!
//! * [`predict_r`] transports the target onto its labeled barycenter and reads
//!   labels off the plan.
//! * [`predict_e`] fits a linear softmax classifier per atom and mixes their
//!   probabilities with the target's barycentric coordinates.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{check_weights, free_support_barycenter, BarycenterConfig};
use crate::data::write_rows;
use crate::distribution::argmax;
use crate::dictionary::Dictionary;
use crate::ot::{barycentric_projection, cost_matrix, solve, SinkhornParams, Solver};
use crate::{Error, LabeledDistribution, Result};

/// Largest `n_T · n_B` for which label reconstruction uses the exact solver.
pub const EXACT_RECONSTRUCTION_LIMIT: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class_probs: Array2<f64>,
    pub hard_labels: Vec<usize>,
}

impl Prediction {
    /// Renormalizes rows and takes the per-row argmax.
    pub fn from_scores(mut scores: Array2<f64>) -> Result<Self> {
        for (i, mut row) in scores.outer_iter_mut().enumerate() {
            let s = row.sum();
            if !(s > 0.0 && s.is_finite()) || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidDistribution(format!("class scores of row {i} cannot be normalized")));
            }
            row /= s;
        }
        let hard_labels = scores.outer_iter().map(argmax).collect();
        Ok(Self {
            class_probs: scores,
            hard_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.hard_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_labels.is_empty()
    }

    /// `row,label,p0,…` with one line per target point.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let c = self.class_probs.ncols();
        let mut header = vec!["row".to_string(), "label".to_string()];
        header.extend((0..c).map(|j| format!("p{j}")));
        write_rows(path.as_ref(), &header, self.len(), |i, row| {
            row.push(i.to_string());
            row.push(self.hard_labels[i].to_string());
            row.extend(self.class_probs.row(i).iter().map(|p| p.to_string()));
        })
    }
}

/// Settings for barycentric label reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub barycenter: BarycenterConfig,
    /// Used when the target-to-barycenter problem is too large for the exact solver.
    pub sinkhorn: SinkhornParams,
}

/// Labels each target point by the plan-weighted labels of the barycenter
/// supports it is transported to.
pub fn predict_r(
    dict: &Dictionary,
    target: ArrayView2<'_, f64>,
    cfg: &ReconstructionConfig,
    seed: u64,
) -> Result<Prediction> {
    if target.nrows() == 0 {
        return Err(Error::InvalidArgument("empty target set".into()));
    }
    let bary = free_support_barycenter(dict.atoms(), dict.alpha(), &cfg.barycenter, seed)?.distribution;
    let target = LabeledDistribution::unlabeled(target.to_owned())?;
    let solver = if target.n() * bary.n() <= EXACT_RECONSTRUCTION_LIMIT {
        Solver::Exact
    } else {
        Solver::Sinkhorn(cfg.sinkhorn)
    };
    let plan = solve(&cost_matrix(&target, &bary.without_labels(), 0.0)?, &solver)?;
    let (_, labels) = barycentric_projection(&plan, &bary)?;
    Prediction::from_scores(labels.expect("dictionary atoms are labeled"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.1,
        }
    }
}

/// Multinomial logistic regression, `softmax(x W + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxClassifier {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    logits
}

impl SoftmaxClassifier {
    /// Full-batch gradient descent on the mean cross-entropy against hard
    /// labels, from zero weights. Errors if the parameters stop being finite.
    pub fn fit(x: ArrayView2<'_, f64>, classes: &[usize], n_classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || classes.len() != n {
            return Err(Error::shape("classifier features vs labels", (n, x.ncols()), (classes.len(), 1)));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= n_classes) {
            return Err(Error::InvalidArgument(format!("class {bad} outside 0..{n_classes}")));
        }
        let mut onehot = Array2::<f64>::zeros((n, n_classes));
        for (i, &c) in classes.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        let mut model = Self {
            weights: Array2::zeros((x.ncols(), n_classes)),
            bias: Array1::zeros(n_classes),
        };
        let step = cfg.learning_rate / n as f64;
        for _ in 0..cfg.steps {
            let residual = model.predict_proba(x) - &onehot;
            model.weights.scaled_add(-step, &x.t().dot(&residual));
            model.bias.scaled_add(-step, &residual.sum_axis(Axis(0)));
            if !model.weights.iter().chain(model.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::Solver("softmax classifier diverged".into()));
            }
        }
        Ok(model)
    }

    pub fn fit_distribution(data: &LabeledDistribution, cfg: &ClassifierConfig) -> Result<Self> {
        let classes = data
            .hard_labels()
            .ok_or_else(|| Error::InvalidArgument("classifier needs labeled data".into()))?;
        Self::fit(data.features(), &classes, data.n_classes().expect("labeled"), cfg)
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        softmax_rows(x.dot(&self.weights) + &self.bias)
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Prediction> {
        Prediction::from_scores(self.predict_proba(x))
    }
}

/// One classifier per atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomEnsemble {
    pub classifiers: Vec<SoftmaxClassifier>,
}

impl AtomEnsemble {
    pub fn fit(atoms: &[LabeledDistribution], cfg: &ClassifierConfig) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs at least one atom".into()));
        }
        let classifiers = atoms
            .par_iter()
            .enumerate()
            .map(|(k, atom)| {
                if !atom.is_labeled() {
                    return Err(Error::InvalidArgument(format!("atom {k} is unlabeled")));
                }
                SoftmaxClassifier::fit_distribution(atom, cfg).map_err(|e| match e {
                    Error::Solver(_) => Error::ClassifierDiverged { atom: k },
                    other => other,
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { classifiers })
    }

    /// `Σ_k α_k softmax_k(x)` before row normalization; affine in `α`.
    pub fn scores(&self, alpha: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if alpha.len() != self.classifiers.len() {
            return Err(Error::shape("ensemble weights", (alpha.len(), 1), (self.classifiers.len(), 1)));
        }
        let c = self.classifiers[0].bias.len();
        let mut out = Array2::<f64>::zeros((x.nrows(), c));
        for (clf, &a) in self.classifiers.iter().zip(alpha) {
            out.scaled_add(a, &clf.predict_proba(x));
        }
        Ok(out)
    }

    pub fn predict(&self, alpha: &[f64], x: ArrayView2<'_, f64>) -> Result<Prediction> {
        check_weights(alpha, self.classifiers.len())?;
        Prediction::from_scores(self.scores(alpha, x)?)
    }
}

/// Ensemble of per-atom classifiers weighted by `alpha_t`.
pub fn predict_e(
    atoms: &[LabeledDistribution],
    alpha_t: &[f64],
    target: ArrayView2<'_, f64>,
    cfg: &ClassifierConfig,
) -> Result<Prediction> {
    check_weights(alpha_t, atoms.len())?;
    AtomEnsemble::fit(atoms, cfg)?.predict(alpha_t, target)
}
