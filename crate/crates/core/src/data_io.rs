//! Dataset ingestion from CSV, label encoding and the benchmark registry.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError};

pub const DEFAULT_LABEL_COLUMN: &str = "target";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing value at row {row}, column `{col}`")]
    MissingValue { row: usize, col: String },
    #[error("cannot parse `{value}` as a number at row {row}, column `{col}`")]
    ParseError {
        row: usize,
        col: String,
        value: String,
    },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("dataset `{name}` does not match the registry: {detail}")]
    RegistryMismatch { name: String, detail: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Numeric features with dense integer labels.
///
/// Labels index into `class_names`. Subsets produced by [`Dataset::subset`]
/// keep the parent's class space, so a subset may leave some classes empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub source_id: String,
}

impl Dataset {
    /// Builds a dataset and checks every invariant, including that each class
    /// has at least one sample.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        feature_names: Vec<String>,
        class_names: Vec<String>,
        source_id: impl Into<String>,
    ) -> Result<Self, DataError> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(DataError::Invalid("dataset needs N >= 1 and D >= 1".into()));
        }
        if labels.len() != features.rows() {
            return Err(DataError::Invalid(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if feature_names.len() != features.cols() {
            return Err(DataError::Invalid(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.cols()
            )));
        }
        let mut seen = vec![false; class_names.len()];
        for &y in &labels {
            match seen.get_mut(y) {
                Some(s) => *s = true,
                None => {
                    return Err(DataError::Invalid(format!(
                        "label {y} outside 0..{}",
                        class_names.len()
                    )))
                }
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(DataError::Invalid(format!("class {c} has no samples")));
        }
        Ok(Self {
            features,
            labels,
            feature_names,
            class_names,
            source_id: source_id.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            source_id: self.source_id.clone(),
        }
    }

    /// Writes the dataset as CSV with the label column last.
    pub fn write_csv<W: Write>(&self, writer: W, label_column: &str) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(label_column);
        w.write_record(&header)?;
        for (row, &y) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(self.class_names[y].clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn numeric_value(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Maps raw labels to dense ids `0..C`.
///
/// When every label parses as a number the classes are ordered by value,
/// otherwise lexicographically by their UTF-8 bytes.
pub fn encode_labels<S: AsRef<str>>(raw: &[S]) -> (Vec<usize>, Vec<String>) {
    let distinct: BTreeSet<&str> = raw.iter().map(|s| s.as_ref()).collect();
    let mut classes: Vec<&str> = distinct.into_iter().collect();
    if classes.iter().all(|c| numeric_value(c).is_some()) {
        classes.sort_by(|a, b| {
            let (x, y) = (numeric_value(a).unwrap(), numeric_value(b).unwrap());
            x.partial_cmp(&y).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
        });
    }
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let labels = raw.iter().map(|s| index[s.as_ref()]).collect();
    (labels, classes.into_iter().map(str::to_owned).collect())
}

/// Inverse of [`encode_labels`].
pub fn decode_labels(labels: &[usize], class_names: &[String]) -> Vec<String> {
    labels.iter().map(|&y| class_names[y].clone()).collect()
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_csv(file, label_column, source_id)
}

/// Parses CSV from any reader. Row numbers in errors are 1-based data rows.
pub fn read_csv<R: Read>(
    reader: R,
    label_column: &str,
    source_id: impl Into<String>,
) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::SchemaError(format!("label column `{label_column}` not found")))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(DataError::SchemaError("no feature columns".into()));
    }

    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != header.len() {
            return Err(DataError::SchemaError(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(DataError::MissingValue {
                    row,
                    col: header[c].clone(),
                });
            }
            if c == label_idx {
                raw_labels.push(cell.to_owned());
            } else {
                let v = numeric_value(cell).ok_or_else(|| DataError::ParseError {
                    row,
                    col: header[c].clone(),
                    value: cell.to_owned(),
                })?;
                data.push(v);
            }
        }
    }
    let n = raw_labels.len();
    let features = Matrix::from_vec(n, feature_names.len(), data)?;
    let (labels, class_names) = encode_labels(&raw_labels);
    Dataset::new(features, labels, feature_names, class_names, source_id)
}

/// One benchmark dataset with its published dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub openml_id: u32,
    pub expected_n: usize,
    pub expected_d: usize,
    pub expected_classes: usize,
}

impl RegistryEntry {
    pub fn validate(&self, dataset: &Dataset) -> Result<(), DataError> {
        let checks = [
            ("samples", self.expected_n, dataset.n_samples()),
            ("features", self.expected_d, dataset.n_features()),
            ("classes", self.expected_classes, dataset.n_classes()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(DataError::RegistryMismatch {
                    name: self.name.to_owned(),
                    detail: format!("expected {expected} {what}, found {got}"),
                });
            }
        }
        Ok(())
    }
}

const REGISTRY: [RegistryEntry; 6] = [
    RegistryEntry { name: "vehicle", openml_id: 54, expected_n: 846, expected_d: 18, expected_classes: 4 },
    RegistryEntry { name: "steel", openml_id: 1504, expected_n: 1941, expected_d: 33, expected_classes: 2 },
    RegistryEntry { name: "biodeg", openml_id: 1494, expected_n: 1055, expected_d: 41, expected_classes: 2 },
    RegistryEntry { name: "protein", openml_id: 40966, expected_n: 1080, expected_d: 77, expected_classes: 8 },
    RegistryEntry { name: "texture", openml_id: 40499, expected_n: 5500, expected_d: 40, expected_classes: 11 },
    RegistryEntry { name: "fourier", openml_id: 14, expected_n: 2000, expected_d: 76, expected_classes: 10 },
];

pub fn registry() -> &'static [RegistryEntry] {
    &REGISTRY
}

pub fn registry_entry(name: &str) -> Option<&'static RegistryEntry> {
    REGISTRY.iter().find(|e| e.name == name)
}

/// Parameters for an isotropic Gaussian-blobs dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub n_samples: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub cluster_std: f64,
    /// Class centers are drawn uniformly from `[-center_box, center_box]^D`.
    pub center_box: f64,
    pub seed: u64,
}

/// Seeded Gaussian blobs; samples are assigned to classes round-robin so
/// class sizes differ by at most one.
pub fn gaussian_blobs(spec: &BlobSpec) -> Dataset {
    assert!(spec.n_classes >= 1 && spec.n_samples >= spec.n_classes && spec.n_features >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.n_features)
                .map(|_| rng.random_range(-spec.center_box..=spec.center_box))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.cluster_std).expect("cluster_std must be finite and >= 0");
    let mut data = Vec::with_capacity(spec.n_samples * spec.n_features);
    let mut labels = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let y = i % spec.n_classes;
        labels.push(y);
        for c in &centers[y] {
            data.push(c + noise.sample(&mut rng));
        }
    }
    let features = Matrix::from_vec(spec.n_samples, spec.n_features, data).unwrap();
    Dataset::new(
        features,
        labels,
        (0..spec.n_features).map(|j| format!("f{j}")).collect(),
        (0..spec.n_classes).map(|c| c.to_string()).collect(),
        format!("blobs{}", spec.n_samples),
    )
    .unwrap()
}

/// Generator parameters of the bundled `blobs300.csv` toy dataset.
pub fn toy_blob_spec() -> BlobSpec {
    BlobSpec {
        n_samples: 300,
        n_features: 6,
        n_classes: 3,
        cluster_std: 2.0,
        center_box: 3.0,
        seed: 300,
    }
}

/// The bundled 300-sample toy dataset, parsed from the CSV shipped with the crate.
pub fn bundled_toy() -> Dataset {
    read_csv(BUNDLED_TOY_CSV.as_bytes(), DEFAULT_LABEL_COLUMN, "blobs300").expect("bundled CSV is valid")
}

pub const BUNDLED_TOY_CSV: &str = include_str!("../data/blobs300.csv");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_csv() {
        let text = "a,b,target\n1,2,x\n3,4.5,y\n-1,0,x\n";
        let ds = read_csv(text.as_bytes(), "target", "t").unwrap();
        assert_eq!(ds.n_samples(), 3);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.features.row(1), &[3.0, 4.5]);
    }

    #[test]
    fn label_column_anywhere() {
        let text = "target,a\nb,1\na,2\n";
        let ds = read_csv(text.as_bytes(), "target", "t").unwrap();
        assert_eq!(ds.feature_names, vec!["a"]);
        assert_eq!(ds.labels, vec![1, 0]);
    }

    #[test]
    fn parse_error() {
        let text = "a,target\nabc,1\n";
        match read_csv(text.as_bytes(), "target", "t") {
            Err(DataError::ParseError { row, col, value }) => {
                assert_eq!((row, col.as_str(), value.as_str()), (1, "a", "abc"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_is_a_parse_error() {
        let text = "a,target\nNaN,1\n";
        assert!(matches!(
            read_csv(text.as_bytes(), "target", "t"),
            Err(DataError::ParseError { .. })
        ));
    }

    #[test]
    fn missing_value() {
        let text = "a,b,target\n1,,1\n";
        assert!(matches!(
            read_csv(text.as_bytes(), "target", "t"),
            Err(DataError::MissingValue { row: 1, .. })
        ));
    }

    #[test]
    fn missing_label_column() {
        let text = "a,b\n1,2\n";
        assert!(matches!(
            read_csv(text.as_bytes(), "target", "t"),
            Err(DataError::SchemaError(_))
        ));
    }

    #[test]
    fn lexicographic_labels() {
        let (labels, classes) = encode_labels(&["b", "a", "b"]);
        assert_eq!(classes, vec!["a", "b"]);
        assert_eq!(labels, vec![1, 0, 1]);
    }

    #[test]
    fn numeric_labels_by_value() {
        let (labels, classes) = encode_labels(&["10", "2", "10"]);
        assert_eq!(classes, vec!["2", "10"]);
        assert_eq!(labels, vec![1, 0, 1]);
        assert_eq!(decode_labels(&labels, &classes), vec!["10", "2", "10"]);
    }

    #[test]
    fn single_label() {
        let (labels, classes) = encode_labels(&["only", "only"]);
        assert_eq!(classes.len(), 1);
        assert_eq!(labels, vec![0, 0]);
    }

    #[test]
    fn registry_contents() {
        let reg = registry();
        assert_eq!(reg.len(), 6);
        let protein = registry_entry("protein").unwrap();
        assert_eq!((protein.openml_id, protein.expected_d, protein.expected_classes), (40966, 77, 8));
        assert_eq!(registry_entry("texture").unwrap().expected_classes, 11);
        let vehicle = registry_entry("vehicle").unwrap();
        assert_eq!(
            (vehicle.openml_id, vehicle.expected_n, vehicle.expected_d, vehicle.expected_classes),
            (54, 846, 18, 4)
        );
    }

    #[test]
    fn registry_validation() {
        let vehicle = registry_entry("vehicle").unwrap();
        let like_vehicle = gaussian_blobs(&BlobSpec {
            n_samples: 846,
            n_features: 18,
            n_classes: 4,
            cluster_std: 1.0,
            center_box: 1.0,
            seed: 1,
        });
        vehicle.validate(&like_vehicle).unwrap();
        let wrong = like_vehicle.subset(&(0..845).collect::<Vec<_>>());
        assert!(matches!(vehicle.validate(&wrong), Err(DataError::RegistryMismatch { .. })));
    }

    #[test]
    fn bundled_toy_matches_generator() {
        let ds = bundled_toy();
        assert_eq!(ds.n_samples(), 300);
        let generated = gaussian_blobs(&toy_blob_spec());
        assert_eq!(ds.features, generated.features);
        assert_eq!(ds.labels, generated.labels);
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ds = gaussian_blobs(&BlobSpec {
            n_samples: 20,
            n_features: 3,
            n_classes: 2,
            cluster_std: 0.7,
            center_box: 5.0,
            seed: 9,
        });
        let mut buf = Vec::new();
        ds.write_csv(&mut buf, "target").unwrap();
        let back = read_csv(buf.as_slice(), "target", ds.source_id.clone()).unwrap();
        assert_eq!(back, ds);
    }
}
