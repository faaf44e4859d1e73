//! Uniform-weight empirical distributions with optional soft labels.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on the row sums of a label matrix.
pub const LABEL_ROW_TOL: f64 = 1e-9;

/// An empirical measure `(1/n) Σ δ(x - x_i)` whose supports may carry soft
/// labels.
///
/// `features` is `n × d`; `labels`, when present, is `n × C` and row-stochastic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDistribution {
    features: Array2<f64>,
    labels: Option<Array2<f64>>,
}

impl LabeledDistribution {
    /// Builds a distribution after checking every invariant.
    pub fn new(features: Array2<f64>, labels: Option<Array2<f64>>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidDistribution(format!(
                "need at least one sample and one feature, got {n}x{d}"
            )));
        }
        if let Some((pos, v)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "non-finite feature {v} at flat index {pos}"
            )));
        }
        if let Some(y) = &labels {
            if y.nrows() != n {
                return Err(Error::shape("labels vs features", y.dim(), (n, d)));
            }
            if y.ncols() == 0 {
                return Err(Error::InvalidDistribution("labels with zero classes".into()));
            }
            for (i, row) in y.outer_iter().enumerate() {
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::InvalidDistribution(format!(
                        "label row {i} has entries outside [0, 1]"
                    )));
                }
                let s = row.sum();
                if (s - 1.0).abs() > LABEL_ROW_TOL {
                    return Err(Error::InvalidDistribution(format!(
                        "label row {i} sums to {s}"
                    )));
                }
            }
        }
        Ok(Self { features, labels })
    }

    pub fn unlabeled(features: Array2<f64>) -> Result<Self> {
        Self::new(features, None)
    }

    /// One-hot labels from class indices.
    pub fn with_class_indices(features: Array2<f64>, classes: &[usize], n_classes: usize) -> Result<Self> {
        if classes.len() != features.nrows() {
            return Err(Error::shape(
                "class indices vs features",
                (classes.len(), 1),
                features.dim(),
            ));
        }
        let mut y = Array2::zeros((classes.len(), n_classes));
        for (i, &c) in classes.iter().enumerate() {
            if c >= n_classes {
                return Err(Error::InvalidDistribution(format!(
                    "class {c} out of range for {n_classes} classes"
                )));
            }
            y[[i, c]] = 1.0;
        }
        Self::new(features, Some(y))
    }

    /// Skips validation. Callers inside the crate guarantee the invariants.
    pub(crate) fn from_parts(features: Array2<f64>, labels: Option<Array2<f64>>) -> Self {
        debug_assert!(labels.as_ref().is_none_or(|y| y.nrows() == features.nrows()));
        Self { features, labels }
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|y| y.ncols())
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> Option<ArrayView2<'_, f64>> {
        self.labels.as_ref().map(|y| y.view())
    }

    pub(crate) fn features_mut(&mut self) -> &mut Array2<f64> {
        &mut self.features
    }

    pub(crate) fn labels_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.labels.as_mut()
    }

    pub fn into_parts(self) -> (Array2<f64>, Option<Array2<f64>>) {
        (self.features, self.labels)
    }

    pub fn without_labels(&self) -> Self {
        Self::from_parts(self.features.clone(), None)
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self::from_parts(
            self.features.select(Axis(0), indices),
            self.labels.as_ref().map(|y| y.select(Axis(0), indices)),
        )
    }

    /// Argmax per label row, ties resolved to the lowest class index.
    pub fn hard_labels(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|y| y.outer_iter().map(argmax).collect())
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (c, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_bad_label_rows() {
        let x = array![[0.0], [1.0]];
        assert!(LabeledDistribution::new(x.clone(), Some(array![[0.5, 0.4], [1.0, 0.0]])).is_err());
        assert!(LabeledDistribution::new(x.clone(), Some(array![[1.5, -0.5], [1.0, 0.0]])).is_err());
        assert!(LabeledDistribution::new(x, Some(array![[0.5, 0.5], [0.0, 1.0]])).is_ok());
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(LabeledDistribution::unlabeled(Array2::zeros((0, 2))).is_err());
        assert!(LabeledDistribution::unlabeled(Array2::zeros((2, 0))).is_err());
        assert!(LabeledDistribution::unlabeled(array![[f64::NAN]]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let d = LabeledDistribution::new(array![[0.0]], Some(array![[0.5, 0.5]])).unwrap();
        assert_eq!(d.hard_labels().unwrap(), vec![0]);
    }
}
