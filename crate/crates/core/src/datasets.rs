//! Datasets: the Gaussian teacher toy task, label noise, holdout splits and CSV
//! ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, RngStream};

/// Row-major feature matrix with one real label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Vec<f64>, labels: Vec<f64>, dim: usize) -> Result<Self> {
        let name = name.into();
        if dim == 0 {
            return Err(Error::invalid(format!(
                "dataset `{name}`: feature dimension must be >= 1"
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid(format!("dataset `{name}` has no samples")));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericDomain {
                location: format!("dataset `{name}` row {}", i / dim),
                detail: "non-finite feature".into(),
            });
        }
        if let Some(i) = labels.iter().position(|x| !x.is_finite()) {
            return Err(Error::NumericDomain {
                location: format!("dataset `{name}` row {i}"),
                detail: "non-finite label".into(),
            });
        }
        Ok(Self {
            name,
            features,
            labels,
            dim,
        })
    }

    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: rows[bad].len(),
            });
        }
        Self::new(name, rows.concat(), labels, dim)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "index {i} out of range for {} samples",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(name, features, labels, self.dim)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Appends one sample.
    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.features.extend_from_slice(x);
        self.labels.push(y);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_test: 1000,
            dim: 20,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 {
            return Err(Error::invalid("toy n_train must be >= 2"));
        }
        if self.n_test < 1 {
            return Err(Error::invalid("toy n_test must be >= 1"));
        }
        if self.dim < 1 {
            return Err(Error::invalid("toy dim must be >= 1"));
        }
        Ok(())
    }
}

const TEACHER_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// Binary teacher label: 1 when `teacher . x > 0`, else 0 (ties go to 0).
pub fn teacher_label(teacher: &[f64], x: &[f64]) -> f64 {
    if dot(teacher, x) > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn gaussian_teacher_set(name: &str, teacher: &[f64], n: usize, rng: &mut RngStream) -> Result<Dataset> {
    let dim = teacher.len();
    let features = rng.normal_vec(n * dim);
    let labels = features.chunks(dim).map(|x| teacher_label(teacher, x)).collect();
    Dataset::new(name, features, labels, dim)
}

/// Gaussian inputs labelled by a random linear teacher. Returns `(train, test, teacher)`.
pub fn generate_toy(cfg: &ToyConfig) -> Result<(Dataset, Dataset, Vec<f64>)> {
    cfg.validate()?;
    let teacher = RngStream::new(cfg.seed, TEACHER_STREAM).normal_vec(cfg.dim);
    let train = gaussian_teacher_set(
        "toy-train",
        &teacher,
        cfg.n_train,
        &mut RngStream::new(cfg.seed, TRAIN_STREAM),
    )?;
    let test = gaussian_teacher_set(
        "toy-test",
        &teacher,
        cfg.n_test,
        &mut RngStream::new(cfg.seed, TEST_STREAM),
    )?;
    Ok((train, test, teacher))
}

/// Flips exactly `round(flip_fraction * n)` distinct binary labels.
pub fn inject_label_noise(data: &Dataset, flip_fraction: f64, rng: &mut RngStream) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&flip_fraction) {
        return Err(Error::invalid(format!("flip_fraction {flip_fraction} outside [0, 1]")));
    }
    if let Some(i) = data.labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!(
            "label noise needs binary labels; row {i} has {}",
            data.labels[i]
        )));
    }
    let n = data.len();
    let k = (flip_fraction * n as f64).round() as usize;
    let mut out = data.clone();
    for i in rng.distinct_indices(n, k) {
        out.labels[i] = 1.0 - out.labels[i];
    }
    Ok(out)
}

/// Uniform random partition into `(S, S')` with `|S'| = round(holdout_fraction * n)`.
pub fn split_train_holdout(data: &Dataset, holdout_fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "holdout_fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let n = data.len();
    let n_hold = (holdout_fraction * n as f64).round() as usize;
    if n_hold == 0 || n_hold >= n {
        return Err(Error::invalid(format!(
            "holdout fraction {holdout_fraction} of {n} samples leaves an empty side"
        )));
    }
    let perm = rng.permutation(n);
    let mut hold: Vec<usize> = perm[..n_hold].to_vec();
    let mut train: Vec<usize> = perm[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    let s = data.subset(format!("{}-train", data.name), &train)?;
    let s_prime = data.subset(format!("{}-holdout", data.name), &hold)?;
    Ok((s, s_prime))
}

/// Reads a headed CSV; every column but `label_column` becomes a feature, in header order.
pub fn load_csv_dataset(path: &Path, label_column: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: cannot read header: {e}", path.display())))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Schema(format!("label column `{label_column}` not found in {}", path.display())))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Schema(format!("{} has no feature columns", path.display())));
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row: row + 1,
            column: String::new(),
            detail: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: row + 1,
                column: String::new(),
                detail: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: row + 1,
                column: headers[col].to_string(),
                detail: format!("`{cell}` is not a number"),
            })?;
            if col == label_idx {
                labels.push(value);
            } else {
                features.push(value);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Schema(format!(
            "{} has a header but no data rows",
            path.display()
        )));
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
    Dataset::new(name, features, labels, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn small(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, -(i as f64)]).collect();
        let labels = (0..n).map(|i| (i % 2) as f64).collect();
        Dataset::from_rows("small", &rows, labels).unwrap()
    }

    #[test]
    fn toy_shapes() {
        let (train, test, teacher) = generate_toy(&ToyConfig::default()).unwrap();
        assert_eq!((train.len(), train.dim()), (100, 20));
        assert_eq!((test.len(), test.dim()), (1000, 20));
        assert_eq!(teacher.len(), 20);
    }

    #[test]
    fn toy_labels_follow_teacher() {
        let cfg = ToyConfig {
            seed: 11,
            ..ToyConfig::default()
        };
        let (mut train, test, teacher) = generate_toy(&cfg).unwrap();
        for data in [&train, &test] {
            for i in 0..data.len() {
                assert_eq!(data.label(i), teacher_label(&teacher, data.row(i)));
            }
        }
        let neg: Vec<f64> = teacher.iter().map(|x| -x).collect();
        train.push(&teacher, teacher_label(&teacher, &teacher)).unwrap();
        assert_eq!(train.label(train.len() - 1), 1.0);
        assert_eq!(teacher_label(&teacher, &neg), 0.0);
        assert_eq!(teacher_label(&teacher, &[0.0; 20]), 0.0);
    }

    #[test]
    fn toy_train_and_test_use_different_streams() {
        let (train, test, _) = generate_toy(&ToyConfig::default()).unwrap();
        assert_ne!(train.row(0), test.row(0));
    }

    #[test]
    fn toy_rejects_bad_config() {
        let cfg = ToyConfig {
            n_train: 1,
            ..ToyConfig::default()
        };
        assert!(generate_toy(&cfg).is_err());
    }

    #[test]
    fn label_noise_exact_counts() {
        let data = small(100);
        let mut rng = RngStream::new(5, 0);
        assert_eq!(inject_label_noise(&data, 0.0, &mut rng).unwrap(), data);
        let all = inject_label_noise(&data, 1.0, &mut rng).unwrap();
        assert!((0..100).all(|i| all.label(i) != data.label(i)));
        for trial in 0..1000 {
            let frac = (trial % 11) as f64 / 10.0;
            let noisy = inject_label_noise(&data, frac, &mut rng).unwrap();
            let changed = (0..100).filter(|&i| noisy.label(i) != data.label(i)).count();
            assert_eq!(changed, (frac * 100.0).round() as usize);
            assert_eq!(noisy.features(), data.features());
        }
    }

    #[test]
    fn label_noise_rejects_bad_inputs() {
        let data = small(4);
        let mut rng = RngStream::new(5, 0);
        assert!(inject_label_noise(&data, 1.5, &mut rng).is_err());
        let non_binary = Dataset::from_rows("x", &[vec![1.0]], vec![2.0]).unwrap();
        assert!(inject_label_noise(&non_binary, 0.5, &mut rng).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let data = small(10);
        let (s, sp) = split_train_holdout(&data, 0.5, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!((s.len(), sp.len()), (5, 5));
        let mut firsts: Vec<i64> = (0..5)
            .map(|i| s.row(i)[0] as i64)
            .chain((0..5).map(|i| sp.row(i)[0] as i64))
            .collect();
        firsts.sort();
        assert_eq!(firsts, (0..10).collect::<Vec<_>>());

        let (s2, sp2) = split_train_holdout(&data, 0.5, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!((s, sp), (s2, sp2));
    }

    #[test]
    fn split_rounding_and_errors() {
        let data = small(3);
        let (s, sp) = split_train_holdout(&data, 0.33, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!((s.len(), sp.len()), (2, 1));
        assert!(split_train_holdout(&data, 0.1, &mut RngStream::new(1, 0)).is_err());
        assert!(split_train_holdout(&data, 1.0, &mut RngStream::new(1, 0)).is_err());
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_parses_in_header_order() {
        let f = write_tmp("a,y,b\n1.0,0,2.0\n3.5,1,-4\n5,1,6e-1\n");
        let d = load_csv_dataset(f.path(), "y").unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert_eq!(d.row(1), &[3.5, -4.0]);
        assert_eq!(d.labels(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn csv_header_only_is_schema_error() {
        let f = write_tmp("a,b,y\n");
        assert!(matches!(load_csv_dataset(f.path(), "y"), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_missing_label_column() {
        let f = write_tmp("a,b\n1,2\n");
        match load_csv_dataset(f.path(), "label") {
            Err(Error::Schema(msg)) => assert!(msg.contains("label")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_bad_cell_names_location() {
        let f = write_tmp("a,y\n1,0\nfoo,1\n");
        match load_csv_dataset(f.path(), "y") {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_missing_file() {
        assert!(matches!(
            load_csv_dataset(Path::new("/nonexistent/data.csv"), "y"),
            Err(Error::Io { .. })
        ));
    }
}
