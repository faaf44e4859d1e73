//! Euclidean projection onto the probability simplex.

use ndarray::{Array1, ArrayView1, ArrayViewMut1};

/// Points already on the simplex within this slack are returned untouched.
const ON_SIMPLEX_SLACK: f64 = 1e-12;

/// Nearest point of `{w : w ≥ 0, Σ w = 1}` to `v` (sort-and-threshold).
///
/// ```
/// use dadil::simplex::simplex_project;
/// assert_eq!(simplex_project(&[2.0, 0.0]), vec![1.0, 0.0]);
/// assert_eq!(simplex_project(&[0.6, 0.6]), vec![0.5, 0.5]);
/// ```
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty vector onto the simplex");
    if v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= ON_SIMPLEX_SLACK {
        return v.to_vec();
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

pub fn project_array(v: ArrayView1<'_, f64>) -> Array1<f64> {
    Array1::from(simplex_project(&v.to_vec()))
}

pub(crate) fn project_in_place(mut row: ArrayViewMut1<'_, f64>) {
    let p = simplex_project(&row.to_vec());
    row.iter_mut().zip(p).for_each(|(r, p)| *r = p);
}

pub fn is_on_simplex(v: &[f64], tol: f64) -> bool {
    v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}
