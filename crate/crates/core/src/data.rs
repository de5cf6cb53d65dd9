//! Tabular datasets: CSV ingestion, standardization, splits, and MCAR injection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};
use crate::rng::{derive_seed, seeded};
use crate::schema::{FeatureKind, FeatureSchema};

/// Cell texts treated as missing values.
pub const MISSING_TOKENS: [&str; 4] = ["", "NA", "NaN", "?"];

pub fn is_missing_token(cell: &str) -> bool {
    MISSING_TOKENS.contains(&cell.trim())
}

/// Per-feature affine standardization. Categorical features keep mean 0 and
/// scale 1 and are stored as category indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Identity transform over `d` features.
    pub fn identity(d: usize) -> Self {
        Standardization {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    /// Population mean and standard deviation of each continuous column,
    /// ignoring missing (NaN) entries.
    pub fn fit(schema: &FeatureSchema, rows: &[Vec<f64>]) -> Result<Self> {
        let d = schema.len();
        let mut st = Standardization::identity(d);
        for i in 0..d {
            if !schema.is_continuous(i) {
                continue;
            }
            let vals: Vec<f64> = rows.iter().map(|r| r[i]).filter(|v| !v.is_nan()).collect();
            let name = &schema.columns[i].name;
            if vals.is_empty() {
                return Err(AceError::config(format!(
                    "column `{name}` has no observed values in the training split"
                )));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 0.0 && std.is_finite()) {
                return Err(AceError::config(format!(
                    "column `{name}` is constant on the training split and cannot be standardized; drop it or add variation"
                )));
            }
            st.mean[i] = mean;
            st.std[i] = std;
        }
        Ok(st)
    }

    pub fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i]) / self.std[i])
            .collect()
    }

    pub fn destandardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &v)| v * self.std[i] + self.mean[i])
            .collect()
    }

    pub fn destandardize_value(&self, dim: usize, v: f64) -> f64 {
        v * self.std[dim] + self.mean[dim]
    }

    pub fn standardize_value(&self, dim: usize, v: f64) -> f64 {
        (v - self.mean[dim]) / self.std[dim]
    }
}

/// Rows of one split. Missing entries are NaN and flagged in `missing`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub rows: Vec<Vec<f64>>,
    pub missing: Vec<Vec<bool>>,
}

impl Split {
    /// Rows with missing flags derived from NaN entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let missing = rows.iter().map(|r| r.iter().map(|v| v.is_nan()).collect()).collect();
        Split { rows, missing }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Marks each cell missing with probability `rate`.
    fn inject<R: Rng + ?Sized>(&mut self, rate: f64, rng: &mut R) {
        for (row, miss) in self.rows.iter_mut().zip(&mut self.missing) {
            for (v, m) in row.iter_mut().zip(miss.iter_mut()) {
                if rng.random::<f64>() < rate {
                    *m = true;
                    *v = f64::NAN;
                }
            }
        }
    }
}

/// Fractions of rows assigned to train, validation, and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    /// Split sizes for `n` rows: `round(f·n)` for train and validation, the
    /// remainder for test.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AceError::config(format!(
                "split fractions must be in [0, 1] and sum to 1, got {f:?}"
            )));
        }
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        Ok((train, val, n - train - val))
    }
}

/// A standardized dataset with train/validation/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub stats: Standardization,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    /// Standardizes already-split rows (original units, NaN for missing)
    /// with statistics from the training split.
    pub fn from_splits(
        schema: FeatureSchema,
        train: Vec<Vec<f64>>,
        val: Vec<Vec<f64>>,
        test: Vec<Vec<f64>>,
    ) -> Result<Self> {
        schema.validate()?;
        for (r, row) in train.iter().chain(&val).chain(&test).enumerate() {
            check_row(&schema, row, r)?;
        }
        let stats = Standardization::fit(&schema, &train)?;
        let apply = |rows: Vec<Vec<f64>>| Split::from_rows(rows.iter().map(|r| stats.standardize(r)).collect());
        Ok(Dataset {
            train: apply(train),
            val: apply(val),
            test: apply(test),
            schema,
            stats,
        })
    }

    /// Shuffles rows with `seed` and splits them by `fractions`.
    pub fn from_rows(schema: FeatureSchema, mut rows: Vec<Vec<f64>>, fractions: SplitFractions, seed: u64) -> Result<Self> {
        let (ntr, nva, _) = fractions.sizes(rows.len())?;
        rows.shuffle(&mut seeded(derive_seed(seed, 0x5117)));
        let test = rows.split_off(ntr + nva);
        let val = rows.split_off(ntr);
        Dataset::from_splits(schema, rows, val, test)
    }

    pub fn dims(&self) -> usize {
        self.schema.len()
    }

    /// Marks train and validation cells missing completely at random. The
    /// test split is left untouched.
    pub fn inject_mcar(&self, rate: f64, seed: u64) -> Result<Dataset> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AceError::config(format!("missing rate must be in [0, 1), got {rate}")));
        }
        let mut out = self.clone();
        let mut rng = seeded(derive_seed(seed, 0x3CA2));
        out.train.inject(rate, &mut rng);
        out.val.inject(rate, &mut rng);
        Ok(out)
    }
}

/// Checks length, finiteness, and category ranges; NaN (missing) is allowed.
pub fn check_row(schema: &FeatureSchema, row: &[f64], r: usize) -> Result<()> {
    if row.len() != schema.len() {
        return Err(AceError::Data {
            row: r,
            column: "*".into(),
            message: format!("expected {} values, found {}", schema.len(), row.len()),
        });
    }
    for (i, &v) in row.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        let bad = match schema.category_count(i) {
            None => !v.is_finite(),
            Some(c) => !(v >= 0.0 && v < c as f64 && v.fract() == 0.0),
        };
        if bad {
            return Err(AceError::Data {
                row: r,
                column: schema.columns[i].name.clone(),
                message: format!("value {v} is not valid for this column"),
            });
        }
    }
    Ok(())
}

/// Parses one CSV cell. Missing tokens give NaN; categorical cells may be a
/// category label or its index.
pub fn parse_cell(schema: &FeatureSchema, dim: usize, cell: &str, row: usize) -> Result<f64> {
    if is_missing_token(cell) {
        return Ok(f64::NAN);
    }
    let text = cell.trim();
    let column = || schema.columns[dim].name.clone();
    match &schema.columns[dim].kind {
        FeatureKind::Continuous => match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(AceError::Data {
                row,
                column: column(),
                message: format!("cannot parse `{text}` as a number"),
            }),
        },
        FeatureKind::Categorical { categories } => {
            if let Some(k) = categories.iter().position(|c| c == text) {
                return Ok(k as f64);
            }
            match text.parse::<usize>() {
                Ok(k) if k < categories.len() => Ok(k as f64),
                _ => Err(AceError::Data {
                    row,
                    column: column(),
                    message: format!("`{text}` is not one of the categories {categories:?}"),
                }),
            }
        }
    }
}

/// A CSV table in original units with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Original cell text, kept so untouched cells can be written back verbatim.
    pub cells: Vec<Vec<String>>,
}

/// Reads a headered CSV whose columns match `schema` by name and order.
pub fn read_table(path: &Path, schema: &FeatureSchema) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let names = schema.names();
    if header.len() != names.len() || header.iter().zip(&names).any(|(h, n)| h != n) {
        return Err(AceError::config(format!(
            "{}: header {header:?} does not match schema columns {names:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != names.len() {
            return Err(AceError::Data {
                row: r,
                column: "*".into(),
                message: format!("expected {} cells, found {}", names.len(), rec.len()),
            });
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(i, c)| parse_cell(schema, i, c, r))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
        cells.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows, cells })
}

fn csv_error(path: &Path, e: csv::Error) -> AceError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AceError::io(path, io),
        other => AceError::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Loads, shuffles, splits, and standardizes a CSV file.
pub fn load_csv(path: &Path, schema: &FeatureSchema, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    let table = read_table(path, schema)?;
    Dataset::from_rows(schema.clone(), table.rows, fractions, seed)
}
