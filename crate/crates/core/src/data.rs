//! Delimited-text datasets, masks, splitting and standardization.
//!
//! Task (response) cells that are empty or the literal `NaN` are unobserved
//! and become `mask = false`; feature cells must always parse.

use crate::kernel::RealArray;
use crate::objective::{ObjectiveError, ResponseBatch};
use crate::rng::{self, Purpose};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("file has no header row")]
    NoHeader,
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("column {0:?} appears more than once")]
    DuplicateColumn(String),
    #[error("row {row}, column {column:?}: feature value {value:?} is not a number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}, column {column:?}: missing feature value")]
    MissingFeature { row: usize, column: String },
    #[error("row {row}, column {column:?}: response value {value:?} is not a number")]
    BadResponse { row: usize, column: String, value: String },
    #[error("row {row} has {found} fields, header has {expected}")]
    Ragged { row: usize, found: usize, expected: usize },
    #[error("need at least 5 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("training split is empty")]
    EmptyTrain,
    #[error("feature count {found} does not match {expected}")]
    FeatureCount { found: usize, expected: usize },
}

/// Per-feature affine transform fitted on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant columns.
    pub sd: Vec<f64>,
}

/// Per-task min-max scaling of responses to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseScaling {
    pub min: Vec<f64>,
    /// `max - min`, or 1 for a constant task.
    pub range: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, p]`
    pub features: RealArray,
    /// `[N, T]`; unobserved cells hold 0.
    pub responses: RealArray,
    /// `[N, T]`
    pub mask: Vec<bool>,
    pub feature_names: Vec<String>,
    pub task_names: Vec<String>,
    pub feature_stats: Option<FeatureStats>,
    pub response_scaling: Option<ResponseScaling>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train, valid or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub labels: Vec<Split>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn rows(&self, which: Split) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, which: Split) -> usize {
        self.labels.iter().filter(|&&l| l == which).count()
    }
}

impl Dataset {
    pub fn new(
        features: RealArray,
        responses: RealArray,
        mask: Vec<bool>,
        feature_names: Vec<String>,
        task_names: Vec<String>,
    ) -> Self {
        assert_eq!(features.shape()[0], responses.shape()[0], "row count");
        assert_eq!(mask.len(), responses.len(), "mask size");
        assert_eq!(features.shape()[1], feature_names.len(), "feature names");
        assert_eq!(responses.shape()[1], task_names.len(), "task names");
        Self {
            features,
            responses,
            mask,
            feature_names,
            task_names,
            feature_stats: None,
            response_scaling: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_tasks(&self) -> usize {
        self.responses.shape()[1]
    }

    /// Observed fraction over all cells.
    pub fn observed_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn response_batch(&self) -> ResponseBatch {
        ResponseBatch {
            y: self.responses.clone(),
            mask: self.mask.clone(),
        }
    }

    /// Copy of the given rows, in order. Stats are carried over.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let (p, t) = (self.num_features(), self.num_tasks());
        let mut x = Vec::with_capacity(rows.len() * p);
        let mut y = Vec::with_capacity(rows.len() * t);
        let mut mask = Vec::with_capacity(rows.len() * t);
        for &r in rows {
            x.extend_from_slice(self.features.row(r));
            y.extend_from_slice(self.responses.row(r));
            mask.extend_from_slice(&self.mask[r * t..(r + 1) * t]);
        }
        Dataset {
            features: RealArray::new(vec![rows.len(), p], x).expect("row gather"),
            responses: RealArray::new(vec![rows.len(), t], y).expect("row gather"),
            mask,
            feature_names: self.feature_names.clone(),
            task_names: self.task_names.clone(),
            feature_stats: self.feature_stats.clone(),
            response_scaling: self.response_scaling.clone(),
        }
    }

    /// Checks every observed response against an objective.
    pub fn validate_responses(&self, objective: crate::objective::Objective) -> Result<(), ObjectiveError> {
        for (y, &m) in self.responses.as_slice().iter().zip(&self.mask) {
            if m {
                objective.validate_response(*y)?;
            }
        }
        Ok(())
    }

    /// Applies stored or given feature statistics in place.
    pub fn apply_feature_stats(&mut self, stats: &FeatureStats) -> Result<(), DataError> {
        let p = self.num_features();
        if stats.mean.len() != p || stats.sd.len() != p {
            return Err(DataError::FeatureCount {
                found: p,
                expected: stats.mean.len(),
            });
        }
        for row in self.features.as_mut_slice().chunks_mut(p) {
            for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.sd) {
                *v = (*v - m) / s;
            }
        }
        self.feature_stats = Some(stats.clone());
        Ok(())
    }

    pub fn apply_response_scaling(&mut self, scaling: &ResponseScaling) {
        let t = self.num_tasks();
        for (i, v) in self.responses.as_mut_slice().iter_mut().enumerate() {
            if self.mask[i] {
                *v = (*v - scaling.min[i % t]) / scaling.range[i % t];
            }
        }
        self.response_scaling = Some(scaling.clone());
    }
}

/// Standardizes features with population statistics of the training rows.
///
/// A column that is constant on the training rows keeps `sd = 1`, so it
/// becomes exactly zero there.
pub fn standardize(dataset: &Dataset, assignment: &SplitAssignment) -> Result<Dataset, DataError> {
    let stats = fit_feature_stats(dataset, &assignment.rows(Split::Train))?;
    let mut out = dataset.clone();
    out.apply_feature_stats(&stats)?;
    Ok(out)
}

pub fn fit_feature_stats(dataset: &Dataset, train_rows: &[usize]) -> Result<FeatureStats, DataError> {
    if train_rows.is_empty() {
        return Err(DataError::EmptyTrain);
    }
    let p = dataset.num_features();
    let n = train_rows.len() as f64;
    let mut mean = vec![0.0; p];
    for &r in train_rows {
        for (m, v) in mean.iter_mut().zip(dataset.features.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    let mut constant = vec![true; p];
    let first = dataset.features.row(train_rows[0]);
    for &r in train_rows {
        for (f, v) in dataset.features.row(r).iter().enumerate() {
            let d = v - mean[f];
            var[f] += d * d;
            constant[f] &= *v == first[f];
        }
    }
    let sd = var
        .iter()
        .zip(&constant)
        .map(|(v, &c)| if c || *v == 0.0 { 1.0 } else { (v / n).sqrt() })
        .collect();
    // a constant column's mean is its value exactly, so it zeroes
    for (f, &c) in constant.iter().enumerate() {
        if c {
            mean[f] = first[f];
        }
    }
    Ok(FeatureStats { mean, sd })
}

/// Min-max response scaling fitted on the observed training cells.
pub fn fit_response_scaling(dataset: &Dataset, train_rows: &[usize]) -> ResponseScaling {
    let t = dataset.num_tasks();
    let mut lo = vec![f64::INFINITY; t];
    let mut hi = vec![f64::NEG_INFINITY; t];
    for &r in train_rows {
        for task in 0..t {
            if dataset.mask[r * t + task] {
                let y = dataset.responses.as_slice()[r * t + task];
                lo[task] = lo[task].min(y);
                hi[task] = hi[task].max(y);
            }
        }
    }
    let mut min = Vec::with_capacity(t);
    let mut range = Vec::with_capacity(t);
    for (l, h) in lo.into_iter().zip(hi) {
        if l.is_finite() && h > l {
            min.push(l);
            range.push(h - l);
        } else {
            min.push(if l.is_finite() { l } else { 0.0 });
            range.push(1.0);
        }
    }
    ResponseScaling { min, range }
}

impl ResponseScaling {
    pub fn inverse(&self, task: usize, scaled: f64) -> f64 {
        scaled * self.range[task] + self.min[task]
    }
}

/// Seeded shuffle, then the first `round(0.64 N)` rows train, the next
/// `round(0.16 N)` validate, the rest test.
pub fn split(n: usize, seed: u64) -> Result<SplitAssignment, DataError> {
    if n < 5 {
        return Err(DataError::TooFewRows(n));
    }
    let n_train = (0.64 * n as f64).round() as usize;
    let n_valid = (0.16 * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let mut labels = vec![Split::Test; n];
    for (pos, &row) in order.iter().enumerate() {
        if pos < n_train {
            labels[row] = Split::Train;
        } else if pos < n_train + n_valid {
            labels[row] = Split::Valid;
        }
    }
    Ok(SplitAssignment { labels, seed })
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NaN"
}

fn parse_feature(cell: &str, row: usize, column: &str) -> Result<f64, DataError> {
    let c = cell.trim();
    if c.is_empty() {
        return Err(DataError::MissingFeature {
            row,
            column: column.to_string(),
        });
    }
    match c.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NonNumeric {
            row,
            column: column.to_string(),
            value: c.to_string(),
        }),
    }
}

/// Which columns to read.
#[derive(Debug, Clone, Default)]
pub struct CsvColumns {
    pub tasks: Vec<String>,
    /// Feature columns in order; `None` means every non-task column.
    pub features: Option<Vec<String>>,
    /// Absent task columns are allowed and read as fully unobserved.
    pub optional_tasks: bool,
}

impl CsvColumns {
    pub fn tasks(tasks: &[&str]) -> Self {
        Self {
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }
}

pub fn load_csv(path: &Path, tasks: &[&str], delimiter: u8) -> Result<Dataset, DataError> {
    load_csv_columns(path, &CsvColumns::tasks(tasks), delimiter)
}

pub fn load_csv_columns(path: &Path, columns: &CsvColumns, delimiter: u8) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, columns, delimiter)
}

/// Parses a dataset from any reader. Rows are numbered from 1 after the header.
pub fn read_csv<R: Read>(reader: R, columns: &CsvColumns, delimiter: u8) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::NoHeader);
    }
    for (i, h) in header.iter().enumerate() {
        if header[..i].contains(h) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
    }
    let find = |name: &str| header.iter().position(|h| h == name);

    let mut task_cols = Vec::with_capacity(columns.tasks.len());
    for t in &columns.tasks {
        match find(t) {
            Some(i) => task_cols.push(Some(i)),
            None if columns.optional_tasks => task_cols.push(None),
            None => return Err(DataError::UnknownColumn(t.clone())),
        }
    }
    let feature_cols: Vec<usize> = match &columns.features {
        Some(names) => names
            .iter()
            .map(|n| find(n).ok_or_else(|| DataError::UnknownColumn(n.clone())))
            .collect::<Result<_, _>>()?,
        None => (0..header.len()).filter(|i| !task_cols.contains(&Some(*i))).collect(),
    };

    let (p, t) = (feature_cols.len(), task_cols.len());
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut mask = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != header.len() {
            return Err(DataError::Ragged {
                row,
                found: record.len(),
                expected: header.len(),
            });
        }
        for &c in &feature_cols {
            x.push(parse_feature(&record[c], row, &header[c])?);
        }
        for tc in &task_cols {
            let cell = tc.map(|c| &record[c]).unwrap_or("");
            if is_missing(cell) {
                y.push(0.0);
                mask.push(false);
            } else {
                let c = tc.expect("present column");
                match cell.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() => {
                        y.push(v);
                        mask.push(true);
                    }
                    _ => {
                        return Err(DataError::BadResponse {
                            row,
                            column: header[c].clone(),
                            value: cell.to_string(),
                        })
                    }
                }
            }
        }
    }
    let n = x.len().checked_div(p).unwrap_or(mask.len() / t.max(1));
    Ok(Dataset::new(
        RealArray::new(vec![n, p], x).expect("parsed features"),
        RealArray::new(vec![n, t], y).expect("parsed responses"),
        mask,
        feature_cols.iter().map(|&c| header[c].clone()).collect(),
        columns.tasks.clone(),
    ))
}

/// Writes features then tasks; unobserved responses are empty cells. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn write_csv(dataset: &Dataset, path: &Path, delimiter: u8) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv_to(dataset, std::io::BufWriter::new(file), delimiter)
}

pub fn write_csv_to<W: Write>(dataset: &Dataset, writer: W, delimiter: u8) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(writer);
    let header: Vec<&str> = dataset
        .feature_names
        .iter()
        .chain(&dataset.task_names)
        .map(String::as_str)
        .collect();
    w.write_record(&header)?;
    let t = dataset.num_tasks();
    let mut cells: Vec<String> = Vec::with_capacity(header.len());
    for r in 0..dataset.len() {
        cells.clear();
        cells.extend(dataset.features.row(r).iter().map(|v| v.to_string()));
        for task in 0..t {
            if dataset.mask[r * t + task] {
                cells.push(dataset.responses.row(r)[task].to_string());
            } else {
                cells.push(String::new());
            }
        }
        w.write_record(&cells)?;
    }
    w.flush().map_err(|e| DataError::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, tasks: &[&str]) -> Result<Dataset, DataError> {
        read_csv(text.as_bytes(), &CsvColumns::tasks(tasks), b',')
    }

    #[test]
    fn empty_response_is_masked() {
        let d = parse("a,b,y\n1,2,3\n4,5,\n6,7,1e1\n", &["y"]).unwrap();
        assert_eq!(d.mask, vec![true, false, true]);
        assert_eq!(d.responses.as_slice(), &[3.0, 0.0, 10.0]);
        assert_eq!(d.feature_names, vec!["a", "b"]);
        let d = parse("a,y\n1,NaN\n", &["y"]).unwrap();
        assert_eq!(d.mask, vec![false]);
    }

    #[test]
    fn header_only_is_empty() {
        let d = parse("a,b,y\n", &["y"]).unwrap();
        assert_eq!(d.len(), 0);
        assert_eq!(d.num_features(), 2);
    }

    #[test]
    fn feature_errors_name_row_and_column() {
        match parse("a,y\n1,2\nfoo,3\n", &["y"]) {
            Err(DataError::NonNumeric { row: 2, column, .. }) => assert_eq!(column, "a"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("a,y\n,2\n", &["y"]), Err(DataError::MissingFeature { row: 1, .. })));
        assert!(matches!(parse("a,y\n1,2\n", &["z"]), Err(DataError::UnknownColumn(_))));
        assert!(matches!(parse("a,y\n1,x\n", &["y"]), Err(DataError::BadResponse { .. })));
        assert!(matches!(parse("a,y\n1\n", &["y"]), Err(DataError::Ragged { .. })));
    }

    #[test]
    fn split_proportions() {
        let s = split(100, 3).unwrap();
        assert_eq!((s.count(Split::Train), s.count(Split::Valid), s.count(Split::Test)), (64, 16, 20));
        let s = split(5, 3).unwrap();
        assert_eq!((s.count(Split::Train), s.count(Split::Valid), s.count(Split::Test)), (3, 1, 1));
        assert_eq!(split(77, 9).unwrap(), split(77, 9).unwrap());
        assert_ne!(split(77, 9).unwrap().labels, split(77, 10).unwrap().labels);
        assert!(split(4, 0).is_err());
    }

    #[test]
    fn standardize_uses_train_rows_only() {
        let x = vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0, 100.0, 5.0];
        let d = Dataset::new(
            RealArray::new(vec![5, 2], x).unwrap(),
            RealArray::zeros(&[5, 1]),
            vec![true; 5],
            vec!["a".into(), "c".into()],
            vec!["y".into()],
        );
        let s = SplitAssignment {
            labels: vec![Split::Train, Split::Train, Split::Train, Split::Valid, Split::Test],
            seed: 0,
        };
        let z = standardize(&d, &s).unwrap();
        let stats = z.feature_stats.clone().unwrap();
        assert_eq!(stats.mean, vec![2.0, 5.0]);
        assert_eq!(stats.sd[1], 1.0);
        let train: Vec<f64> = (0..3).map(|r| z.features.row(r)[0]).collect();
        let m = train.iter().sum::<f64>() / 3.0;
        let sd = (train.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 3.0).sqrt();
        assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        assert!((0..5).all(|r| z.features.row(r)[1] == 0.0));
        // the test row is far from the train distribution
        assert!(z.features.row(4)[0] > 50.0);
    }

    #[test]
    fn response_scaling_inverts() {
        let d = Dataset::new(
            RealArray::zeros(&[4, 1]),
            RealArray::new(vec![4, 1], vec![3.0, -1.5, 7.25, 0.1]).unwrap(),
            vec![true; 4],
            vec!["a".into()],
            vec!["y".into()],
        );
        let sc = fit_response_scaling(&d, &[0, 1, 2, 3]);
        let mut s = d.clone();
        s.apply_response_scaling(&sc);
        assert!(s.responses.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        for (i, &y) in d.responses.as_slice().iter().enumerate() {
            assert!((sc.inverse(0, s.responses.as_slice()[i]) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn select_keeps_mask_alignment() {
        let d = parse("a,y,z\n1,2,\n3,,4\n5,6,7\n", &["y", "z"]).unwrap();
        let s = d.select(&[2, 1]);
        assert_eq!(s.mask, vec![true, true, false, true]);
        assert_eq!(s.features.as_slice(), &[5.0, 3.0]);
    }
}
