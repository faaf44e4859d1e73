//! Synthetic multi-domain data and the CSV feature format.
//!
//! Every synthetic domain is the same Gaussian mixture (class means equally
//! spaced on a circle in the first two features) pushed through a
//! domain-specific rotation and translation. The rotation angle is the knob
//! that controls how far a domain drifts from the others.
//!
//! CSV files carry a header `f0,…,f{d-1},label`, one sample per line. Labels
//! are class indices, or `-1` on every line for an unlabeled file.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, LabeledDistribution, Result};

/// Parameters of a synthetic multi-domain dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub n_per_domain: usize,
    pub n_classes: usize,
    pub n_features: usize,
    /// Distance of each class mean from the origin.
    pub radius: f64,
    /// Within-class standard deviation.
    pub std: f64,
    /// Rotation of each domain in the plane of the first two features, degrees.
    pub rotations_deg: Vec<f64>,
    /// Per-domain translation; empty means no translation anywhere.
    pub translations: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 4,
            n_per_domain: 300,
            n_classes: 3,
            n_features: 2,
            radius: 3.0,
            std: 1.0,
            rotations_deg: vec![0.0, 15.0, 30.0, 45.0],
            translations: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_domains == 0 || self.n_classes == 0 || self.n_per_domain == 0 {
            return bad("n_domains, n_classes and n_per_domain must be positive".into());
        }
        if !self.n_per_domain.is_multiple_of(self.n_classes) {
            return bad(format!(
                "n_per_domain {} is not divisible by {} classes",
                self.n_per_domain, self.n_classes
            ));
        }
        if self.n_features < 2 {
            return bad(format!("need at least 2 features for rotations, got {}", self.n_features));
        }
        if self.rotations_deg.len() != self.n_domains {
            return bad(format!(
                "{} rotations for {} domains",
                self.rotations_deg.len(),
                self.n_domains
            ));
        }
        if !self.translations.is_empty()
            && (self.translations.len() != self.n_domains
                || self.translations.iter().any(|t| t.len() != self.n_features))
        {
            return bad("translations must be empty or one vector of n_features per domain".into());
        }
        if !(self.std >= 0.0 && self.radius.is_finite()) {
            return bad("std must be >= 0 and radius finite".into());
        }
        Ok(())
    }
}

/// One labeled distribution per domain, deterministic in `spec.seed`.
///
/// Sample `i` of every domain belongs to class `i mod C`, so classes are
/// exactly balanced.
pub fn generate(spec: &SynthSpec) -> Result<Vec<LabeledDistribution>> {
    spec.validate()?;
    let (n, d, c) = (spec.n_per_domain, spec.n_features, spec.n_classes);
    let means: Vec<(f64, f64)> = (0..c)
        .map(|k| {
            let phi = 2.0 * PI * k as f64 / c as f64;
            (spec.radius * phi.cos(), spec.radius * phi.sin())
        })
        .collect();

    (0..spec.n_domains)
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(l as u64);
            let theta = spec.rotations_deg[l].to_radians();
            let (sin, cos) = theta.sin_cos();
            let classes: Vec<usize> = (0..n).map(|i| i % c).collect();
            let mut x = Array2::<f64>::zeros((n, d));
            for (i, &k) in classes.iter().enumerate() {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[[i, j]] = spec.std * z;
                }
                x[[i, 0]] += means[k].0;
                x[[i, 1]] += means[k].1;
                let (u, v) = (x[[i, 0]], x[[i, 1]]);
                x[[i, 0]] = cos * u - sin * v;
                x[[i, 1]] = sin * u + cos * v;
                if let Some(t) = spec.translations.get(l) {
                    for j in 0..d {
                        x[[i, j]] += t[j];
                    }
                }
            }
            LabeledDistribution::with_class_indices(x, &classes, c)
        })
        .collect()
}

fn csv_error(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Csv {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Writes `f0,…,f{d-1},label`. Labels must be one-hot; unlabeled
/// distributions get `-1` everywhere.
pub fn save_csv(dist: &LabeledDistribution, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let hard = match dist.labels() {
        None => None,
        Some(y) => {
            let one_hot = y.outer_iter().all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0));
            if !one_hot {
                return Err(Error::InvalidArgument(
                    "save_csv needs one-hot labels; use save_soft_csv for soft labels".into(),
                ));
            }
            dist.hard_labels()
        }
    };
    let mut header: Vec<String> = (0..dist.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    write_rows(path, &header, dist.n(), |i, row| {
        row.extend(dist.point(i).iter().map(|v| v.to_string()));
        row.push(hard.as_ref().map_or("-1".to_string(), |h| h[i].to_string()));
    })
}

/// Writes features followed by one probability column per class:
/// `f0,…,f{d-1},p0,…,p{C-1}`.
pub fn save_soft_csv(dist: &LabeledDistribution, path: impl AsRef<Path>) -> Result<()> {
    let y = dist
        .labels()
        .ok_or_else(|| Error::InvalidArgument("save_soft_csv needs labels".into()))?;
    let mut header: Vec<String> = (0..dist.dim()).map(|j| format!("f{j}")).collect();
    header.extend((0..y.ncols()).map(|c| format!("p{c}")));
    write_rows(path.as_ref(), &header, dist.n(), |i, row| {
        row.extend(dist.point(i).iter().map(|v| v.to_string()));
        row.extend(y.row(i).iter().map(|v| v.to_string()));
    })
}

pub(crate) fn write_rows(path: &Path, header: &[String], n: usize, mut fill: impl FnMut(usize, &mut Vec<String>)) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(File::create(path)?));
    let to_err = |e: csv::Error| csv_error(path, 0, e.to_string());
    out.write_record(header).map_err(to_err)?;
    let mut row = Vec::with_capacity(header.len());
    for i in 0..n {
        row.clear();
        fill(i, &mut row);
        out.write_record(&row).map_err(to_err)?;
    }
    out.into_inner()
        .map_err(|e| csv_error(path, 0, e.to_string()))?
        .flush()?;
    Ok(())
}

/// Reads every record as numbers, checking the header prefix `f0..f{d-1}`
/// and row widths. Returns the header and parsed rows.
fn read_numeric(path: &Path) -> Result<(Vec<String>, Vec<(u64, Vec<f64>)>)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, 1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_error(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(csv_error(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let values = record
            .iter()
            .map(|cell| {
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| csv_error(path, line, format!("non-numeric cell {cell:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(csv_error(path, line, format!("non-finite value {v}")));
        }
        rows.push((line, values));
    }
    if rows.is_empty() {
        return Err(csv_error(path, 1, "no data rows"));
    }
    Ok((header, rows))
}

fn feature_count(path: &Path, header: &[String], tail: usize) -> Result<usize> {
    let d = header.len().saturating_sub(tail);
    if d == 0 {
        return Err(csv_error(path, 1, "header has no feature columns"));
    }
    for (j, name) in header[..d].iter().enumerate() {
        if name.trim() != format!("f{j}") {
            return Err(csv_error(path, 1, format!("expected column f{j}, found {name:?}")));
        }
    }
    Ok(d)
}

/// Loads a `f0,…,label` file. `n_classes` fixes `C`; otherwise it is one
/// more than the largest label present.
pub fn load_csv(path: impl AsRef<Path>, n_classes: Option<usize>) -> Result<LabeledDistribution> {
    let path = path.as_ref();
    let (header, rows) = read_numeric(path)?;
    if header.last().map(|h| h.trim()) != Some("label") {
        return Err(csv_error(path, 1, "last column must be `label`"));
    }
    let d = feature_count(path, &header, 1)?;
    let mut x = Array2::zeros((rows.len(), d));
    let mut labels = Vec::with_capacity(rows.len());
    let first_labeled = rows[0].1[d] >= 0.0;
    for (i, (line, values)) in rows.iter().enumerate() {
        for j in 0..d {
            x[[i, j]] = values[j];
        }
        let raw = values[d];
        if raw.fract() != 0.0 || raw < -1.0 {
            return Err(csv_error(path, *line, format!("label {raw} is not a class index or -1")));
        }
        if (raw >= 0.0) != first_labeled {
            return Err(csv_error(path, *line, "mixed labeled and unlabeled rows"));
        }
        labels.push(raw as i64);
    }
    if !first_labeled {
        return LabeledDistribution::unlabeled(x);
    }
    let max = *labels.iter().max().expect("nonempty") as usize;
    let c = n_classes.unwrap_or(max + 1);
    if max >= c {
        let line = rows[labels.iter().position(|&l| l as usize >= c).expect("exists")].0;
        return Err(csv_error(path, line, format!("label {max} out of range for {c} classes")));
    }
    let classes: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    LabeledDistribution::with_class_indices(x, &classes, c)
}

/// Inverse of [`save_soft_csv`]; `n_classes` columns `p0..` follow the features.
pub fn load_soft_csv(path: impl AsRef<Path>, n_classes: usize) -> Result<LabeledDistribution> {
    let path = path.as_ref();
    let (header, rows) = read_numeric(path)?;
    let d = feature_count(path, &header, n_classes)?;
    for (c, name) in header[d..].iter().enumerate() {
        if name.trim() != format!("p{c}") {
            return Err(csv_error(path, 1, format!("expected column p{c}, found {name:?}")));
        }
    }
    let x = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i].1[j]);
    let y = Array2::from_shape_fn((rows.len(), n_classes), |(i, c)| rows[i].1[d + c]);
    LabeledDistribution::new(x, Some(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::{wasserstein, Solver};
    use ndarray::array;

    fn spec(rotations: Vec<f64>, n: usize, c: usize) -> SynthSpec {
        SynthSpec {
            n_domains: rotations.len(),
            n_per_domain: n,
            n_classes: c,
            rotations_deg: rotations,
            radius: 3.0,
            std: 0.5,
            seed: 12,
            ..Default::default()
        }
    }

    #[test]
    fn classes_are_balanced_and_one_hot() {
        let domains = generate(&spec(vec![0.0, 20.0], 30, 3)).unwrap();
        for dom in &domains {
            let hard = dom.hard_labels().unwrap();
            for c in 0..3 {
                assert_eq!(hard.iter().filter(|&&h| h == c).count(), 10);
            }
            assert!(dom.labels().unwrap().iter().all(|&p| p == 0.0 || p == 1.0));
        }
    }

    #[test]
    fn same_law_domains_are_close() {
        let s = spec(vec![0.0, 0.0], 60, 3);
        let domains = generate(&s).unwrap();
        assert_ne!(domains[0], domains[1]);
        let w = wasserstein(&domains[0], &domains[1], 0.0, &Solver::Exact).unwrap();
        assert!(w < s.std * s.std, "{w}");
    }

    #[test]
    fn half_turn_flips_labels_but_not_features() {
        let s = spec(vec![0.0, 180.0], 40, 2);
        let domains = generate(&s).unwrap();
        let features_only = wasserstein(&domains[0], &domains[1], 0.0, &Solver::Exact).unwrap();
        let labeled = wasserstein(&domains[0], &domains[1], 1.0, &Solver::Exact).unwrap();
        assert!(features_only < s.std * s.std, "{features_only}");
        // Every point either pays the label flip (2β) or crosses to the other
        // class mean.
        assert!(labeled > 1.5, "{labeled}");
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(vec![5.0, 10.0, 15.0], 9, 3);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
    }

    #[test]
    fn spec_validation() {
        assert!(generate(&spec(vec![0.0], 10, 3)).is_err());
        assert!(generate(&SynthSpec { n_features: 1, ..spec(vec![0.0], 9, 3) }).is_err());
        assert!(generate(&SynthSpec { n_domains: 2, ..spec(vec![0.0], 9, 3) }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let dom = generate(&spec(vec![33.0], 12, 3)).unwrap().remove(0);
        let p = dir.path().join("d.csv");
        save_csv(&dom, &p).unwrap();
        assert_eq!(load_csv(&p, Some(3)).unwrap(), dom);

        let unl = dom.without_labels();
        save_csv(&unl, &p).unwrap();
        let back = load_csv(&p, None).unwrap();
        assert!(!back.is_labeled());
        assert_eq!(back, unl);

        let soft = LabeledDistribution::new(array![[0.1, 0.2]], Some(array![[0.25, 0.75]])).unwrap();
        assert!(save_csv(&soft, &p).is_err());
        save_soft_csv(&soft, &p).unwrap();
        assert_eq!(load_soft_csv(&p, 2).unwrap(), soft);
    }

    #[test]
    fn hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "f0,f1,label\n1.5,-2,0\n0,0.25,2\n-3e-1,4,1\n").unwrap();
        let d = load_csv(&p, None).unwrap();
        assert_eq!(d.features(), array![[1.5, -2.0], [0.0, 0.25], [-0.3, 4.0]]);
        assert_eq!(
            d.labels().unwrap(),
            array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]
        );
    }

    #[test]
    fn malformed_files_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        let cases = [
            ("f0,label\n1,0\n2\n", "line 3"),
            ("f0,label\n1,0\nx,1\n", "line 3"),
            ("f0,label\n1,0\n2,-1\n", "line 3"),
            ("f0,f1,label\n1,2,0.5\n", "line 2"),
        ];
        for (body, expect) in cases {
            std::fs::write(&p, body).unwrap();
            let err = load_csv(&p, None).unwrap_err().to_string();
            assert!(err.contains(expect), "{body:?}: {err}");
        }
        std::fs::write(&p, "x0,label\n1,0\n").unwrap();
        assert!(load_csv(&p, None).is_err());
    }
}
