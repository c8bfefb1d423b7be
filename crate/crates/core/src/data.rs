//! Datasets: interleaved spirals and numeric CSV files, each with a fixed
//! train/validation split and features standardized on the training rows.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// Angle swept by each spiral arm from the center to radius 1.
pub const SPIRAL_SWEEP: f64 = 2.0 * PI;
pub const TRAIN_FRACTION_NUM: usize = 4;
pub const TRAIN_FRACTION_DEN: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Row-major block of samples handed to the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    pub targets: BatchTargets,
}

impl Batch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Concatenation of `self` and `other`, used to build duplicated batches.
    pub fn concat(&self, other: &Batch) -> Batch {
        assert_eq!(self.dim, other.dim);
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&other.inputs);
        let targets = match (&self.targets, &other.targets) {
            (BatchTargets::Classes(a), BatchTargets::Classes(b)) => {
                BatchTargets::Classes([a.clone(), b.clone()].concat())
            }
            (BatchTargets::Values(a), BatchTargets::Values(b)) => BatchTargets::Values([a.clone(), b.clone()].concat()),
            _ => panic!("cannot concatenate classification and regression batches"),
        };
        Batch {
            inputs,
            rows: self.rows + other.rows,
            dim: self.dim,
            targets,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    targets: Targets,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Dataset {
    /// Assembles a dataset from raw parts; the split must partition the rows.
    pub fn from_parts(
        features: Vec<f64>,
        dim: usize,
        targets: Targets,
        train: Vec<usize>,
        val: Vec<usize>,
    ) -> Result<Self> {
        let n = targets.len();
        if dim == 0 || features.len() != n * dim {
            return Err(Error::Shape(format!(
                "{} feature values for {n} rows of width {dim}",
                features.len()
            )));
        }
        if let Targets::Classes { labels, classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                return Err(Error::Config(format!("label {bad} outside [0, {classes})")));
            }
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("split index {i} is out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("split does not cover every row".into()));
        }
        Ok(Dataset {
            features,
            dim,
            targets,
            train,
            val,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { classes, .. } => Some(classes),
            Targets::Values(_) => None,
        }
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Classes { labels, .. } => BatchTargets::Classes(indices.iter().map(|&i| labels[i]).collect()),
            Targets::Values(v) => BatchTargets::Values(indices.iter().map(|&i| v[i]).collect()),
        };
        Batch {
            inputs,
            rows: indices.len(),
            dim: self.dim,
            targets,
        }
    }

    pub fn train_batch(&self) -> Batch {
        self.batch(&self.train)
    }

    pub fn val_batch(&self) -> Batch {
        self.batch(&self.val)
    }

    pub fn all_batch(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Shifts and scales every feature column to zero mean and unit
    /// (population) variance over the training rows. Constant columns are
    /// only centered.
    pub fn standardize(&mut self) {
        if self.train.is_empty() {
            return;
        }
        let n = self.train.len() as f64;
        for j in 0..self.dim {
            let mean = self.train.iter().map(|&i| self.features[i * self.dim + j]).sum::<f64>() / n;
            let var = self
                .train
                .iter()
                .map(|&i| (self.features[i * self.dim + j] - mean).powi(2))
                .sum::<f64>()
                / n;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..self.len() {
                let x = &mut self.features[i * self.dim + j];
                *x = (*x - mean) / scale;
            }
        }
    }
}

fn train_count(n: usize) -> usize {
    (TRAIN_FRACTION_NUM * n + TRAIN_FRACTION_DEN / 2) / TRAIN_FRACTION_DEN
}

/// Interleaved 2-D spirals, one arm per class, with isotropic Gaussian noise.
///
/// Sample `i` of class `c` lies on its arm at radius `r = (i + 1) / n` and
/// angle `r * SPIRAL_SWEEP + 2 pi c / classes`, then each coordinate gets
/// `noise * N(0, 1)` added. The split is 80/20 stratified by class.
pub fn make_spirals(seed: u64, n_per_class: usize, classes: usize, noise: f64) -> Result<Dataset> {
    if n_per_class == 0 || classes < 2 || noise < 0.0 || !noise.is_finite() {
        return Err(Error::Config(format!(
            "spirals need n_per_class >= 1, classes >= 2, noise >= 0 (got {n_per_class}, {classes}, {noise})"
        )));
    }
    let mut noise_rng = rng::stream(seed, "data.spirals", 0);
    let n = n_per_class * classes;
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let offset = 2.0 * PI * c as f64 / classes as f64;
        for i in 0..n_per_class {
            let r = (i + 1) as f64 / n_per_class as f64;
            let angle = r * SPIRAL_SWEEP + offset;
            let (dx, dy): (f64, f64) = (
                StandardNormal.sample(&mut noise_rng),
                StandardNormal.sample(&mut noise_rng),
            );
            features.push(r * angle.cos() + noise * dx);
            features.push(r * angle.sin() + noise * dy);
            labels.push(c);
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (c * n_per_class..(c + 1) * n_per_class).collect();
        idx.shuffle(&mut rng::stream(seed, "data.split", c as u64));
        let cut = train_count(n_per_class);
        train.extend_from_slice(&idx[..cut]);
        val.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    let mut ds = Dataset::from_parts(features, 2, Targets::Classes { labels, classes }, train, val)?;
    ds.standardize();
    Ok(ds)
}

/// Loads a headered numeric CSV. Integer labels make a classification
/// dataset, anything else a regression one. Rows are split 80/20 by ranking
/// a fixed hash of the row index.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_at = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Schema(format!("no column `{label_column}` in {}", path.display())))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Schema("no feature columns besides the label".into()));
    }

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        // header is line 1
        let row = r + 2;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_at {
                raw_labels.push((row, cell.to_owned()));
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[j].to_owned(),
                reason: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[j].to_owned(),
                    reason: "non-finite value".into(),
                });
            }
            features.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::EmptyData);
    }

    let targets = if let Some(classes) = raw_labels
        .iter()
        .map(|(_, s)| s.parse::<usize>().ok())
        .collect::<Option<Vec<_>>>()
    {
        let count = classes.iter().max().map_or(0, |m| m + 1);
        Targets::Classes {
            labels: classes,
            classes: count,
        }
    } else {
        let mut values = Vec::with_capacity(raw_labels.len());
        for (row, s) in &raw_labels {
            let v: f64 = s
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row: *row,
                    column: label_column.to_owned(),
                    reason: format!("`{s}` is not a number"),
                })?;
            values.push(v);
        }
        Targets::Values(values)
    };

    let n = raw_labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (rng::mix(0x6c61_7761, i as u64), i));
    let cut = train_count(n);
    let mut train = order[..cut].to_vec();
    let mut val = order[cut..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    let mut ds = Dataset::from_parts(features, dim, targets, train, val)?;
    ds.standardize();
    Ok(ds)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            row,
            column: String::new(),
            reason: format!("{kind:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn spirals_are_reproducible() {
        let a = make_spirals(3, 50, 3, 0.2).unwrap();
        let b = make_spirals(3, 50, 3, 0.2).unwrap();
        assert_eq!(bits(a.features()), bits(b.features()));
        assert_eq!(a, b);
        let c = make_spirals(4, 50, 3, 0.2).unwrap();
        assert_ne!(bits(a.features()), bits(c.features()));
    }

    #[test]
    fn noiseless_arms_are_disjoint() {
        let ds = make_spirals(1, 200, 2, 0.0).unwrap();
        let Targets::Classes { labels, .. } = ds.targets() else {
            panic!()
        };
        let arm = |c: usize| -> HashSet<(u64, u64)> {
            (0..ds.len())
                .filter(|&i| labels[i] == c)
                .map(|i| (ds.row(i)[0].to_bits(), ds.row(i)[1].to_bits()))
                .collect()
        };
        let (a, b) = (arm(0), arm(1));
        assert_eq!(a.len(), 200);
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn spiral_split_sizes() {
        let ds = make_spirals(9, 1000, 2, 0.2).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.train_indices().len(), 1600);
        assert_eq!(ds.val_indices().len(), 400);
    }

    #[test]
    fn stratified_split_keeps_class_proportions() {
        let ds = make_spirals(5, 37, 3, 0.1).unwrap();
        let Targets::Classes { labels, .. } = ds.targets() else {
            panic!()
        };
        for c in 0..3 {
            let in_train = ds.train_indices().iter().filter(|&&i| labels[i] == c).count() as f64;
            assert!((in_train - 0.8 * 37.0).abs() <= 1.0);
        }
    }

    #[test]
    fn features_standardized_on_train_split() {
        let ds = make_spirals(2, 100, 2, 0.3).unwrap();
        let n = ds.train_indices().len() as f64;
        for j in 0..2 {
            let col: Vec<f64> = ds.train_indices().iter().map(|&i| ds.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spiral_config_errors() {
        assert!(matches!(make_spirals(1, 0, 2, 0.1), Err(Error::Config(_))));
        assert!(matches!(make_spirals(1, 10, 1, 0.1), Err(Error::Config(_))));
        assert!(matches!(make_spirals(1, 10, 2, -0.1), Err(Error::Config(_))));
    }

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_integer_labels_classify() {
        let f = write_csv("x,y,label\n1.0,2.0,0\n3.5,-1,1\n0,0,0\n");
        let ds = load_csv(f.path(), "label").unwrap();
        assert_eq!(ds.num_classes(), Some(2));
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.len(), 3);
    }

    #[test]
    fn csv_real_labels_regress() {
        let f = write_csv("target,a\n0.5,1\n1.5,2\n");
        let ds = load_csv(f.path(), "target").unwrap();
        assert_eq!(ds.num_classes(), None);
        assert_eq!(ds.targets(), &Targets::Values(vec![0.5, 1.5]));
    }

    #[test]
    fn csv_missing_label_column() {
        let f = write_csv("x,y\n1,2\n");
        assert!(matches!(load_csv(f.path(), "label"), Err(Error::Schema(_))));
    }

    #[test]
    fn csv_bad_cell_reports_position() {
        let f = write_csv("x,y,label\n1,2,0\n1,abc,1\n");
        match load_csv(f.path(), "label") {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "y");
            }
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn csv_hash_split_is_exact_and_stable() {
        let mut body = String::from("a,b,label\n");
        for i in 0..100 {
            body.push_str(&format!("{},{},{}\n", i, i * i % 7, i % 2));
        }
        let f = write_csv(&body);
        let a = load_csv(f.path(), "label").unwrap();
        let b = load_csv(f.path(), "label").unwrap();
        assert_eq!(a.train_indices().len(), 80);
        assert_eq!(a.train_indices(), b.train_indices());
        // not simply the first 80 rows
        assert_ne!(a.train_indices(), (0..80).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn csv_header_only_is_empty() {
        let f = write_csv("x,label\n");
        assert!(matches!(load_csv(f.path(), "label"), Err(Error::EmptyData)));
    }
}
