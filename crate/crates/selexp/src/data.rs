//! Domain types and dataset plumbing: feature vectors, labeled tables,
//! train/calibration/test splitting, CSV ingestion, and z-score
//! standardization.

use crate::rng::RngSpec;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A d-dimensional row of finite feature values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feature vector".into(),
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Deref for FeatureVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Class index into the model's output distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetClass(pub usize);

impl TargetClass {
    pub fn index(&self) -> usize {
        self.0
    }

    pub fn check(&self, num_classes: usize) -> Result<()> {
        if self.0 >= num_classes {
            return Err(Error::ClassOutOfRange {
                class: self.0,
                num_classes,
            });
        }
        Ok(())
    }
}

/// Per-feature importance scores for one (input, target-class) pair, together
/// with the number of black-box evaluations spent producing them (0 for
/// amortized explanations).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub scores: Vec<f64>,
    pub input_id: u64,
    pub target: TargetClass,
    pub inference_cost: u64,
}

impl AttributionVector {
    pub fn new(scores: Vec<f64>, target: TargetClass, inference_cost: u64) -> Result<Self> {
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "attribution scores".into(),
            });
        }
        Ok(Self {
            scores,
            input_id: 0,
            target,
            inference_cost,
        })
    }

    pub fn with_input_id(mut self, id: u64) -> Self {
        self.input_id = id;
        self
    }

    pub fn dim(&self) -> usize {
        self.scores.len()
    }
}

/// A labeled table of rows. `input_id` of a row is its index in this table.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<TargetClass>,
    pub feature_names: Vec<String>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<FeatureVector>, labels: Vec<TargetClass>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = features[0].dim();
        for f in &features {
            if f.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: f.dim(),
                });
            }
        }
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.len(),
                actual: labels.len(),
            });
        }
        let num_classes = labels.iter().map(|y| y.0).max().unwrap_or(0) + 1;
        let feature_names = (0..d).map(|i| format!("x{i}")).collect();
        Ok(Self {
            features,
            labels,
            feature_names,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].dim()
    }

    pub fn row(&self, i: usize) -> (&FeatureVector, TargetClass) {
        (&self.features[i], self.labels[i])
    }

    /// Load a dataset from a CSV file with a header row. All feature columns
    /// must be numeric; `label_column` names the class column (nonnegative
    /// integers). Categorical features must be numerically encoded upstream.
    pub fn from_csv(path: &Path, label_column: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text, label_column)
    }

    pub fn from_csv_str(text: &str, label_column: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::EmptyDataset)?;
        let columns: Vec<&str> = header.split(',').map(str::trim).collect();
        let label_idx = columns
            .iter()
            .position(|c| *c == label_column)
            .ok_or_else(|| {
                Error::Parse(format!("label_column `{label_column}` not found in header"))
            })?;
        let feature_names: Vec<String> = columns
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != label_idx)
            .map(|(_, c)| c.to_string())
            .collect();

        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != columns.len() {
                return Err(Error::Parse(format!(
                    "row {}: expected {} cells, got {}",
                    lineno + 2,
                    columns.len(),
                    cells.len()
                )));
            }
            let mut row = Vec::with_capacity(columns.len() - 1);
            for (i, cell) in cells.iter().enumerate() {
                if i == label_idx {
                    let y: f64 = cell
                        .parse()
                        .map_err(|_| Error::Parse(format!("row {}: bad label `{cell}`", lineno + 2)))?;
                    if y < 0.0 || y.fract() != 0.0 {
                        return Err(Error::Parse(format!(
                            "row {}: label `{cell}` is not a nonnegative integer",
                            lineno + 2
                        )));
                    }
                    labels.push(TargetClass(y as usize));
                } else {
                    let v: f64 = cell.parse().map_err(|_| {
                        Error::Parse(format!("row {}: bad numeric cell `{cell}`", lineno + 2))
                    })?;
                    row.push(v);
                }
            }
            features.push(FeatureVector::new(row)?);
        }
        let mut ds = Self::new(features, labels)?;
        ds.feature_names = feature_names;
        Ok(ds)
    }
}

/// Disjoint train/calibration/test index sets over a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// The three index sets, in order.
    pub fn part(&self, which: SplitPart) -> &[usize] {
        match which {
            SplitPart::Train => &self.train,
            SplitPart::Cal => &self.cal,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPart {
    Train,
    Cal,
    Test,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "cal" => Ok(SplitPart::Cal),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Parse(format!(
                "unknown split `{other}` (expected train|cal|test)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitPart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitPart::Train => write!(f, "train"),
            SplitPart::Cal => write!(f, "cal"),
            SplitPart::Test => write!(f, "test"),
        }
    }
}

/// Shuffle row indices with `rng` and partition them. Calibration and test
/// take `floor(f * N)` rows each; the remainder goes to train.
pub fn split_dataset(n_rows: usize, fractions: (f64, f64, f64), rng: RngSpec) -> Result<DatasetSplit> {
    let (f_train, f_cal, f_test) = fractions;
    if n_rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let fr = [f_train, f_cal, f_test];
    if fr.iter().any(|f| *f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(fr));
    }

    let mut indices = crate::rng::permutation(&mut rng.rng(), n_rows);
    let n_cal = (f_cal * n_rows as f64).floor() as usize;
    let n_test = (f_test * n_rows as f64).floor() as usize;
    let n_train = n_rows - n_cal - n_test;

    let test = indices.split_off(n_train + n_cal);
    let cal = indices.split_off(n_train);
    let train = indices;
    Ok(DatasetSplit { train, cal, test })
}

/// Per-feature z-score transform fitted on the train split. Zero-variance
/// columns keep scale 1 so they map to a constant 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &Dataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = dataset.dim();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(dataset.features[i].values()) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for &i in rows {
            for ((s, v), m) in var.iter_mut().zip(dataset.features[i].values()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Identity transform for pipelines that standardize elsewhere.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &FeatureVector) -> Result<FeatureVector> {
        if x.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: x.dim(),
            });
        }
        FeatureVector::new(
            x.values()
                .iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((v, m), s)| (v - m) / s)
                .collect(),
        )
    }

    pub fn apply_dataset(&self, dataset: &Dataset) -> Result<Dataset> {
        let features = dataset
            .features
            .iter()
            .map(|f| self.apply(f))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Dataset::new(features, dataset.labels.clone())?;
        out.feature_names = dataset.feature_names.clone();
        out.num_classes = dataset.num_classes;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, d: usize) -> Dataset {
        let features = (0..n)
            .map(|i| FeatureVector::new((0..d).map(|j| (i * d + j) as f64).collect()).unwrap())
            .collect();
        let labels = (0..n).map(|i| TargetClass(i % 2)).collect();
        Dataset::new(features, labels).unwrap()
    }

    #[test]
    fn split_sizes_match_paper_setup() {
        let s = split_dataset(4000, (0.5, 0.25, 0.25), RngSpec::from_seed(0)).unwrap();
        assert_eq!(s.train.len(), 2000);
        assert_eq!(s.cal.len(), 1000);
        assert_eq!(s.test.len(), 1000);
    }

    #[test]
    fn degenerate_split_puts_everything_in_train() {
        let s = split_dataset(4, (1.0, 0.0, 0.0), RngSpec::from_seed(0)).unwrap();
        assert_eq!(s.train.len(), 4);
        assert!(s.cal.is_empty() && s.test.is_empty());
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_dataset(10, (0.5, 0.3, 0.2), RngSpec::from_seed(11)).unwrap();
        let b = split_dataset(10, (0.5, 0.3, 0.2), RngSpec::from_seed(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 5);
        assert_eq!(a.cal.len(), 3);
        assert_eq!(a.test.len(), 2);
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(matches!(
            split_dataset(0, (0.5, 0.25, 0.25), RngSpec::from_seed(0)),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            split_dataset(10, (0.5, 0.2, 0.2), RngSpec::from_seed(0)),
            Err(Error::BadFractions(_))
        ));
    }

    #[test]
    fn split_partitions_indices() {
        let s = split_dataset(103, (0.61, 0.18, 0.21), RngSpec::from_seed(5)).unwrap();
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.cal)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn csv_roundtrip_and_label_column() {
        let text = "a,b,label\n1.0,2.0,0\n3.5,-1.0,1\n0.0,0.25,1\n";
        let ds = Dataset::from_csv_str(text, "label").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        assert_eq!(ds.features[1].values(), &[3.5, -1.0]);
        assert_eq!(ds.labels[2], TargetClass(1));
    }

    #[test]
    fn csv_missing_label_column_is_named() {
        let err = Dataset::from_csv_str("a,b\n1,2\n", "label").unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn standardizer_centers_train_rows() {
        let ds = toy(10, 3);
        let rows: Vec<usize> = (0..10).collect();
        let st = Standardizer::fit(&ds, &rows).unwrap();
        let z = st.apply_dataset(&ds).unwrap();
        for j in 0..3 {
            let mean: f64 = z.features.iter().map(|f| f[j]).sum::<f64>() / 10.0;
            let var: f64 = z.features.iter().map(|f| f[j] * f[j]).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn standardizer_handles_constant_column() {
        let features = vec![
            FeatureVector::new(vec![2.0, 1.0]).unwrap(),
            FeatureVector::new(vec![2.0, 3.0]).unwrap(),
        ];
        let ds = Dataset::new(features, vec![TargetClass(0), TargetClass(1)]).unwrap();
        let st = Standardizer::fit(&ds, &[0, 1]).unwrap();
        let z = st.apply(&ds.features[0]).unwrap();
        assert_eq!(z[0], 0.0);
        assert!(z[0].is_finite() && z[1].is_finite());
    }
}
