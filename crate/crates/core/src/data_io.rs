//! Dataset ingestion, standardization, splits, and synthetic data
//! generation for desk-scale runs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Draws};
use crate::targets::sigmoid;

/// Per-column mean and standard deviation used for z-scoring. Constant
/// columns keep a std of 1 so they pass through unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardization {
    pub fn fit(features: &Array2<f64>) -> Self {
        let n = features.nrows() as f64;
        let mean = features.sum_axis(ndarray::Axis(0)) / n;
        let mut std = Array1::<f64>::zeros(features.ncols());
        for j in 0..features.ncols() {
            let s: f64 = features
                .column(j)
                .iter()
                .map(|&v| (v - mean[j]).powi(2))
                .sum();
            let sd = (s / n).sqrt();
            std[j] = if sd > 0.0 { sd } else { 1.0 };
        }
        Standardization { mean, std }
    }

    pub fn apply(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for j in 0..row.len() {
                row[j] = (row[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// A binary-labeled feature table. Raw (unstandardized) features are
/// kept; `design_matrix` produces the standardized matrix with the bias
/// column appended, using the stored parameters when a train/test split
/// fixed them.
#[derive(Debug, Clone)]
pub struct TabularDataset {
    pub features: Array2<f64>,
    pub labels: Array1<f64>,
    pub feature_names: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl TabularDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Array1<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Schema(format!(
                "{} rows of features but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema("features contain non-finite values".into()));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Schema("labels must be 0 or 1".into()));
        }
        Ok(TabularDataset {
            features,
            labels,
            feature_names,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn covariates(&self) -> usize {
        self.features.ncols()
    }

    fn standardization_or_fit(&self) -> Standardization {
        self.standardization
            .clone()
            .unwrap_or_else(|| Standardization::fit(&self.features))
    }

    /// Standardized features with a trailing bias column of ones, the
    /// bias never being rescaled.
    pub fn design_matrix(&self) -> Array2<f64> {
        let params = self.standardization_or_fit();
        let standardized = params.apply(&self.features);
        let (n, d) = (standardized.nrows(), standardized.ncols());
        let mut design = Array2::<f64>::ones((n, d + 1));
        design.slice_mut(ndarray::s![.., ..d]).assign(&standardized);
        design
    }

    /// Writes the standardized design matrix and labels as CSV plus a
    /// JSON sidecar with the standardization parameters.
    pub fn write_standardized(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let params = self.standardization_or_fit();
        let design = self.design_matrix();
        let mut text = String::new();
        for (i, row) in design.rows().into_iter().enumerate() {
            for v in row.iter() {
                write!(text, "{v:.17e},").expect("string write");
            }
            writeln!(text, "{}", self.labels[i]).expect("string write");
        }
        std::fs::write(csv_path, text)?;
        let means: Vec<String> = params.mean.iter().map(|v| format!("{v:.17e}")).collect();
        let stds: Vec<String> = params.std.iter().map(|v| format!("{v:.17e}")).collect();
        let sidecar = format!(
            "{{\"mean\":[{}],\"std\":[{}]}}\n",
            means.join(","),
            stds.join(",")
        );
        std::fs::write(sidecar_path, sidecar)?;
        Ok(())
    }
}

/// Reads the numeric German credit table: whitespace-separated numbers,
/// 24 feature columns plus a final label column with 1 = good → 0 and
/// 2 = bad → 1.
pub fn load_german_credit(path: &Path) -> Result<TabularDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_german_credit(&text)
}

pub(crate) fn parse_german_credit(text: &str) -> Result<TabularDataset> {
    const COLUMNS: usize = 25;
    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != COLUMNS {
            return Err(Error::Schema(format!(
                "line {}: expected {COLUMNS} columns, found {}",
                line_no + 1,
                fields.len()
            )));
        }
        for (c, field) in fields.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                line: line_no + 1,
                msg: format!("cannot parse '{field}' as a number"),
            })?;
            if c + 1 == COLUMNS {
                let label = match value as i64 {
                    1 => 0.0,
                    2 => 1.0,
                    other => {
                        return Err(Error::Parse {
                            line: line_no + 1,
                            msg: format!("label must be 1 or 2, got {other}"),
                        })
                    }
                };
                labels.push(label);
            } else {
                rows.push(value);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Schema("empty dataset file".into()));
    }
    let features = Array2::from_shape_vec((n, COLUMNS - 1), rows).expect("counted shape");
    let names = (0..COLUMNS - 1).map(|i| format!("x{i}")).collect();
    TabularDataset::new(features, Array1::from_vec(labels), names)
}

/// Student/question response triplets with dense indices.
#[derive(Debug, Clone)]
pub struct ResponseDataset {
    pub responses: Vec<(usize, usize, bool)>,
    pub students: usize,
    pub questions: usize,
}

impl ResponseDataset {
    pub fn new(responses: Vec<(usize, usize, bool)>) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::Schema("response dataset is empty".into()));
        }
        let students = responses.iter().map(|r| r.0).max().unwrap() + 1;
        let questions = responses.iter().map(|r| r.1).max().unwrap() + 1;
        let mut seen = HashSet::with_capacity(responses.len());
        let mut student_seen = vec![false; students];
        let mut question_seen = vec![false; questions];
        for &(i, j, _) in &responses {
            if !seen.insert((i, j)) {
                return Err(Error::Schema(format!("duplicate response pair ({i}, {j})")));
            }
            student_seen[i] = true;
            question_seen[j] = true;
        }
        if student_seen.iter().any(|s| !s) || question_seen.iter().any(|q| !q) {
            return Err(Error::Schema(
                "student or question indices are not dense".into(),
            ));
        }
        Ok(ResponseDataset {
            responses,
            students,
            questions,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

/// Reads `student,question,correct` CSV triplets (a header line is
/// permitted and skipped).
pub fn load_irt(path: &Path) -> Result<ResponseDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_irt(&text)
}

pub(crate) fn parse_irt(text: &str) -> Result<ResponseDataset> {
    let mut responses = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if line_no == 0 && trimmed.chars().any(|c| c.is_ascii_alphabetic()) {
            continue; // header
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Schema(format!(
                "line {}: expected 3 comma-separated fields, found {}",
                line_no + 1,
                fields.len()
            )));
        }
        let parse_idx = |field: &str| -> Result<usize> {
            field.parse().map_err(|_| Error::Parse {
                line: line_no + 1,
                msg: format!("cannot parse '{field}' as an index"),
            })
        };
        let student = parse_idx(fields[0])?;
        let question = parse_idx(fields[1])?;
        let correct = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: line_no + 1,
                    msg: format!("outcome must be 0 or 1, got '{other}'"),
                })
            }
        };
        responses.push((student, question, correct));
    }
    ResponseDataset::new(responses)
}

/// Deterministic split into disjoint, exhaustive train/test parts. The
/// standardization parameters are fitted on the training rows and
/// installed on both parts, so test features are scaled by train
/// statistics only.
pub fn train_test_split(
    ds: &TabularDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(TabularDataset, TabularDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::InsufficientData(
            "cannot split fewer than 2 rows".into(),
        ));
    }
    let test_n = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);

    // Fisher-Yates with the counter-based draw sequence
    let mut order: Vec<usize> = (0..n).collect();
    let mut draws = Draws::new(derive_seed(seed, 0x5911), 0);
    for i in (1..n).rev() {
        let j = draws.index(i + 1);
        order.swap(i, j);
    }
    let (test_idx, train_idx) = order.split_at(test_n);

    let take = |idx: &[usize]| -> (Array2<f64>, Array1<f64>) {
        let mut feats = Array2::<f64>::zeros((idx.len(), ds.covariates()));
        let mut labs = Array1::<f64>::zeros(idx.len());
        for (row, &i) in idx.iter().enumerate() {
            feats.row_mut(row).assign(&ds.features.row(i));
            labs[row] = ds.labels[i];
        }
        (feats, labs)
    };
    let (train_x, train_y) = take(train_idx);
    let (test_x, test_y) = take(test_idx);
    let params = Standardization::fit(&train_x);
    let mut train = TabularDataset::new(train_x, train_y, ds.feature_names.clone())?;
    let mut test = TabularDataset::new(test_x, test_y, ds.feature_names.clone())?;
    train.standardization = Some(params.clone());
    test.standardization = Some(params);
    Ok((train, test))
}

/// Synthetic logistic-regression data drawn from the generative model
/// with recorded ground truth. Features are standard normal; the true
/// weight vector (covariates then bias) is drawn from the prior.
pub struct SyntheticLogistic {
    pub dataset: TabularDataset,
    pub true_weights: Array1<f64>,
}

pub fn synth_logistic(n: usize, covariates: usize, seed: u64) -> Result<SyntheticLogistic> {
    if n == 0 || covariates == 0 {
        return Err(Error::Config(
            "synthetic dataset sizes must be positive".into(),
        ));
    }
    let mut draws = Draws::new(derive_seed(seed, 0x10_6157), 0);
    let true_weights = draws.standard_normal_vec(covariates + 1);
    let mut features = Array2::<f64>::zeros((n, covariates));
    let mut labels = Array1::<f64>::zeros(n);
    for i in 0..n {
        let x = draws.standard_normal_vec(covariates);
        let z: f64 = x
            .iter()
            .zip(true_weights.iter())
            .map(|(&xv, &wv)| xv * wv)
            .sum::<f64>()
            + true_weights[covariates];
        let p = sigmoid(z);
        labels[i] = if draws.uniform() < p { 1.0 } else { 0.0 };
        features.row_mut(i).assign(&x);
    }
    let names = (0..covariates).map(|i| format!("x{i}")).collect();
    Ok(SyntheticLogistic {
        dataset: TabularDataset::new(features, labels, names)?,
        true_weights,
    })
}

/// Synthetic 1PL item-response data over a (optionally thinned) full
/// response grid.
pub struct SyntheticIrt {
    pub dataset: ResponseDataset,
    pub abilities: Array1<f64>,
    pub difficulties: Array1<f64>,
    pub mean_ability: f64,
}

pub fn synth_irt(
    students: usize,
    questions: usize,
    keep_fraction: f64,
    seed: u64,
) -> Result<SyntheticIrt> {
    if students == 0 || questions == 0 {
        return Err(Error::Config(
            "synthetic dataset sizes must be positive".into(),
        ));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config("keep fraction must lie in (0,1]".into()));
    }
    let mut draws = Draws::new(derive_seed(seed, 0x197), 0);
    let abilities = draws.standard_normal_vec(students);
    let difficulties = draws.standard_normal_vec(questions);
    let mean_ability = 0.75 + draws.standard_normal();
    let mut responses = Vec::with_capacity(students * questions);
    for i in 0..students {
        for j in 0..questions {
            if keep_fraction < 1.0 && draws.uniform() >= keep_fraction {
                continue;
            }
            let z = abilities[i] - difficulties[j] + mean_ability;
            let y = draws.uniform() < sigmoid(z);
            responses.push((i, j, y));
        }
    }
    Ok(SyntheticIrt {
        dataset: ResponseDataset::new(responses)?,
        abilities,
        difficulties,
        mean_ability,
    })
}

/// Writes a dataset in the numeric whitespace-separated table format the
/// German-credit loader reads (labels mapped back to the 1 = good /
/// 2 = bad convention), so synthetic stand-ins can be materialized as
/// files.
pub fn write_numeric_table(ds: &TabularDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, row) in ds.features.rows().into_iter().enumerate() {
        for v in row.iter() {
            if v.fract() == 0.0 && v.abs() < 1e15 {
                write!(out, "{} ", *v as i64).expect("string write");
            } else {
                write!(out, "{v} ").expect("string write");
            }
        }
        writeln!(out, "{}", if ds.labels[i] == 0.0 { 1 } else { 2 }).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_credit_text(rows: usize) -> String {
        // deterministic small file in the numeric format
        let mut text = String::new();
        for i in 0..rows {
            for c in 0..24 {
                write!(text, "{} ", (i * 7 + c * 3) % 10).unwrap();
            }
            writeln!(text, "{}", 1 + (i % 2)).unwrap();
        }
        text
    }

    #[test]
    fn german_credit_parses_and_maps_labels() {
        let ds = parse_german_credit(&tiny_credit_text(6)).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.covariates(), 24);
        assert_eq!(ds.design_matrix().ncols(), 25);
        // labels alternate 1,2 → 0,1
        assert_eq!(ds.labels[0], 0.0);
        assert_eq!(ds.labels[1], 1.0);
    }

    #[test]
    fn german_credit_rejects_empty_and_malformed() {
        assert!(matches!(parse_german_credit(""), Err(Error::Schema(_))));
        let mut bad = tiny_credit_text(2);
        bad.push_str("1 2 3\n");
        assert!(matches!(parse_german_credit(&bad), Err(Error::Schema(_))));
        let unparsable = tiny_credit_text(1).replace("1\n", "x\n");
        assert!(matches!(
            parse_german_credit(&unparsable),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn design_matrix_is_standardized_with_unit_bias() {
        let ds = parse_german_credit(&tiny_credit_text(50)).unwrap();
        let design = ds.design_matrix();
        for j in 0..24 {
            let col = design.column(j);
            let mean = col.mean().unwrap();
            let var = col.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-10, "column {j} mean {mean}");
            assert!(
                (var.sqrt() - 1.0).abs() < 1e-10,
                "column {j} std {}",
                var.sqrt()
            );
        }
        assert!(design.column(24).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_columns_pass_through() {
        let features = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let ds = TabularDataset::new(
            features,
            array![0.0, 1.0, 0.0],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let design = ds.design_matrix();
        // constant column is centered but not rescaled
        assert!(design.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn irt_parsing_and_counts() {
        let ds = parse_irt("0,0,1\n").unwrap();
        assert_eq!((ds.students, ds.questions, ds.len()), (1, 1, 1));
        let ds = parse_irt("student,question,correct\n0,0,1\n0,1,0\n1,0,0\n1,1,1\n").unwrap();
        assert_eq!((ds.students, ds.questions, ds.len()), (2, 2, 4));
        assert!(matches!(parse_irt("0,0,1\n0,0,0\n"), Err(Error::Schema(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let synth = synth_logistic(1000, 4, 3).unwrap();
        let (train, test) = train_test_split(&synth.dataset, 0.1, 8).unwrap();
        assert_eq!(train.len(), 900);
        assert_eq!(test.len(), 100);
        let (train2, test2) = train_test_split(&synth.dataset, 0.1, 8).unwrap();
        assert_eq!(train.features, train2.features);
        assert_eq!(test.labels, test2.labels);
        // split is disjoint and exhaustive: label counts add up
        let total: f64 = synth.dataset.labels.sum();
        assert_eq!(train.labels.sum() + test.labels.sum(), total);

        let tiny =
            TabularDataset::new(array![[1.0], [2.0]], array![0.0, 1.0], vec!["a".into()]).unwrap();
        let (tr, te) = train_test_split(&tiny, 0.5, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
    }

    #[test]
    fn test_standardization_comes_from_train() {
        let synth = synth_logistic(200, 3, 5).unwrap();
        let (train, test) = train_test_split(&synth.dataset, 0.25, 1).unwrap();
        let expected = Standardization::fit(&train.features);
        assert_eq!(test.standardization.as_ref().unwrap(), &expected);
    }

    #[test]
    fn synth_logistic_reproducible_and_balanced() {
        let a = synth_logistic(200, 5, 42).unwrap();
        let b = synth_logistic(200, 5, 42).unwrap();
        assert_eq!(a.dataset.features, b.dataset.features);
        assert_eq!(a.true_weights, b.true_weights);
        // balance check needs w = 0, so synthesize labels directly
        let mut draws = Draws::new(9, 0);
        let ones = (0..200).filter(|_| draws.uniform() < 0.5).count() as f64;
        assert!((ones / 200.0 - 0.5).abs() < 0.07);
    }

    #[test]
    fn synth_irt_full_grid_counts() {
        let synth = synth_irt(20, 10, 1.0, 7).unwrap();
        assert_eq!(synth.dataset.len(), 200);
        assert_eq!(synth.dataset.students, 20);
        assert_eq!(synth.dataset.questions, 10);
    }

    #[test]
    fn canonical_credit_file_shape_is_1000_by_25() {
        let synth = synth_logistic(1000, 24, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("german.data-numeric");
        write_numeric_table(&synth.dataset, &path).unwrap();
        let ds = load_german_credit(&path).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.design_matrix().dim(), (1000, 25));
    }

    #[test]
    fn numeric_table_round_trips_through_the_loader() {
        let synth = synth_logistic(40, 24, 15).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("standin.data-numeric");
        write_numeric_table(&synth.dataset, &path).unwrap();
        let loaded = load_german_credit(&path).unwrap();
        assert_eq!(loaded.len(), 40);
        assert_eq!(loaded.labels, synth.dataset.labels);
        for (a, b) in loaded.features.iter().zip(synth.dataset.features.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn standardized_round_trip_to_disk() {
        let synth = synth_logistic(30, 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("data.csv");
        let sidecar = dir.path().join("data.json");
        synth.dataset.write_standardized(&csv, &sidecar).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let design = synth.dataset.design_matrix();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 5);
            for j in 0..4 {
                let v: f64 = fields[j].parse().unwrap();
                let diff = (v - design[[i, j]]).abs();
                assert!(diff <= 1e-12 * design[[i, j]].abs().max(1.0));
            }
        }
    }
}
