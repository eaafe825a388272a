//! Reader for the UCI Adult census file and its preprocessing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnMeta, Dataset, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Column names and kinds for the 14 attributes; the label is always the
/// final column.
#[derive(Clone, Debug, PartialEq)]
pub struct AdultSchema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl Default for AdultSchema {
    fn default() -> Self {
        use ColumnKind::*;
        let cols = [
            ("age", Numeric),
            ("workclass", Categorical),
            ("fnlwgt", Numeric),
            ("education", Categorical),
            ("education-num", Numeric),
            ("marital-status", Categorical),
            ("occupation", Categorical),
            ("relationship", Categorical),
            ("race", Categorical),
            ("sex", Categorical),
            ("capital-gain", Numeric),
            ("capital-loss", Numeric),
            ("hours-per-week", Numeric),
            ("native-country", Categorical),
        ];
        Self {
            columns: cols.iter().map(|(n, k)| (n.to_string(), *k)).collect(),
        }
    }
}

impl AdultSchema {
    /// Schema where every column is numeric, e.g. for re-reading an
    /// already encoded table.
    pub fn all_numeric(names: Vec<String>) -> Self {
        Self {
            columns: names.into_iter().map(|n| (n, ColumnKind::Numeric)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.columns.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RawColumn {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl RawColumn {
    pub fn len(&self) -> usize {
        match self {
            RawColumn::Numeric(v) => v.len(),
            RawColumn::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match self {
            RawColumn::Numeric(v) => v[row].is_none(),
            RawColumn::Categorical(v) => v[row].is_none(),
        }
    }
}

/// Parsed but unprocessed rows. `"?"` cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTable {
    pub names: Vec<String>,
    pub columns: Vec<RawColumn>,
    pub labels: Vec<u8>,
}

impl RawTable {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

fn parse_label(token: &str, line: impl FnOnce() -> usize) -> Result<u8> {
    match token.trim().trim_end_matches('.') {
        ">50K" => Ok(1),
        "<=50K" => Ok(0),
        other => Err(Error::Parse {
            line: line(),
            msg: format!("unknown label {other:?}"),
        }),
    }
}

/// Parse Adult-formatted text. Blank lines and the `|`-prefixed banner of
/// the test split are skipped; line numbers in errors are 1-based.
pub fn parse_adult(text: &str, schema: &AdultSchema) -> Result<RawTable> {
    let width = schema.width();
    let mut columns: Vec<RawColumn> = schema
        .columns
        .iter()
        .map(|(_, k)| match k {
            ColumnKind::Numeric => RawColumn::Numeric(Vec::new()),
            ColumnKind::Categorical => RawColumn::Categorical(Vec::new()),
        })
        .collect();
    let mut labels = Vec::new();

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'|'))
        .from_reader(text.as_bytes());
    // the reader skips empty and banner lines without counting them
    let record_lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('|'))
        .map(|(i, _)| i + 1)
        .collect();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let lineno = || record_lines.get(k).copied().unwrap_or(0);
        if record.iter().all(str::is_empty) {
            continue;
        }
        let cells: Vec<&str> = record.iter().collect();
        if cells.len() != width {
            return Err(Error::Parse {
                line: lineno(),
                msg: format!("expected {width} columns, found {}", cells.len()),
            });
        }
        labels.push(parse_label(cells[width - 1], lineno)?);
        for (c, col) in columns.iter_mut().enumerate() {
            let cell = cells[c];
            let missing = cell == "?";
            match col {
                RawColumn::Numeric(v) => {
                    if missing {
                        v.push(None);
                    } else {
                        let x: f64 = cell.parse().map_err(|_| Error::Parse {
                            line: lineno(),
                            msg: format!("column {:?}: {cell:?} is not numeric", schema.columns[c].0),
                        })?;
                        v.push(Some(x));
                    }
                }
                RawColumn::Categorical(v) => {
                    v.push(if missing { None } else { Some(cell.to_string()) });
                }
            }
        }
    }
    Ok(RawTable {
        names: schema.columns.iter().map(|(n, _)| n.clone()).collect(),
        columns,
        labels,
    })
}

pub fn load_adult(path: impl AsRef<Path>, schema: &AdultSchema) -> Result<RawTable> {
    let text = fs::read_to_string(path)?;
    parse_adult(&text, schema)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Population mean and standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shift and scale to zero mean, unit variance. Constant columns become 0.
pub(crate) fn standardize(values: &mut [f64]) -> (f64, f64) {
    let (mean, std) = mean_std(values);
    // relative threshold: a column that is constant up to rounding is constant
    let constant = std <= 1e-12 * mean.abs().max(1.0);
    for v in values.iter_mut() {
        *v = if constant { 0.0 } else { (*v - mean) / std };
    }
    (mean, if constant { 0.0 } else { std })
}

/// Encode categoricals by first appearance, impute missing cells with the
/// column median and standardize every column.
pub fn preprocess(raw: &RawTable) -> Result<Dataset> {
    let n = raw.rows();
    if n == 0 {
        return Err(Error::Preprocess("table has no rows".into()));
    }
    let mut features: Vec<Vec<f64>> = Vec::with_capacity(raw.columns.len());
    let mut meta = Vec::with_capacity(raw.columns.len());

    for (name, col) in raw.names.iter().zip(&raw.columns) {
        let (encoded, codes): (Vec<Option<f64>>, Option<Vec<String>>) = match col {
            RawColumn::Numeric(v) => (v.clone(), None),
            RawColumn::Categorical(v) => {
                let mut index: HashMap<&str, usize> = HashMap::new();
                let mut order = Vec::new();
                let enc = v
                    .iter()
                    .map(|cell| {
                        cell.as_deref().map(|s| {
                            let next = index.len();
                            *index.entry(s).or_insert_with(|| {
                                order.push(s.to_string());
                                next
                            }) as f64
                        })
                    })
                    .collect();
                (enc, Some(order))
            }
        };
        let mut present: Vec<f64> = encoded.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Preprocess(format!("column {name:?} has no values")));
        }
        let mut med = median(&mut present);
        if codes.is_some() {
            med = med.round();
        }
        let mut values: Vec<f64> = encoded.iter().map(|v| v.unwrap_or(med)).collect();
        let (mean, std) = standardize(&mut values);
        features.push(values);
        meta.push(ColumnMeta {
            name: name.clone(),
            categories: codes,
            median: med,
            mean,
            std,
        });
    }

    let samples = (0..n)
        .map(|r| Sample {
            features: features.iter().map(|col| col[r]).collect(),
            label: raw.labels[r],
        })
        .collect();
    Dataset::new(samples, meta)
}
