//! Comma-separated input with a header row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels, TaskKind};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Which columns hold features and which hold labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSchema {
    pub feature_columns: Vec<String>,
    /// One integer column for single-label data, one 0/1 column per class
    /// for multi-label data.
    pub label_columns: Vec<String>,
    #[serde(default)]
    pub kind: TaskKind,
    pub num_classes: usize,
}

impl TabularSchema {
    /// Schema matching what [`write_tabular`] emits for `ds`.
    pub fn for_dataset(ds: &Dataset) -> Self {
        let feature_columns = (0..ds.dim()).map(|i| format!("x{i}")).collect();
        let label_columns = match ds.kind() {
            TaskKind::Single => vec!["label".to_string()],
            TaskKind::Multi => (0..ds.num_classes).map(|i| format!("y{i}")).collect(),
        };
        Self {
            feature_columns,
            label_columns,
            kind: ds.kind(),
            num_classes: ds.num_classes,
        }
    }
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => parse_err(line, format!("expected {expected_len} fields, found {len}")),
        other => parse_err(line, format!("{other:?}")),
    }
}

pub fn load_tabular(path: impl AsRef<Path>, schema: &TabularSchema) -> Result<Dataset> {
    let path = path.as_ref();
    if schema.num_classes == 0 {
        return Err(Error::data("schema declares zero classes"));
    }
    match schema.kind {
        TaskKind::Single if schema.label_columns.len() != 1 => {
            return Err(Error::data("single-label schema needs exactly one label column"))
        }
        TaskKind::Multi if schema.label_columns.len() != schema.num_classes => {
            return Err(Error::data("multi-label schema needs one column per class"))
        }
        _ => {}
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::data(format!("column {name:?} not in header")))
    };
    let feature_idx = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let label_idx = schema
        .label_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let d = feature_idx.len();
    let c = schema.num_classes;
    let mut features = Vec::new();
    let mut single = Vec::new();
    let mut multi = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for &j in &feature_idx {
            let v: f64 = record[j]
                .parse()
                .map_err(|_| parse_err(line, format!("bad number {:?}", &record[j])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {v}")));
            }
            features.push(v);
        }
        match schema.kind {
            TaskKind::Single => {
                let raw = &record[label_idx[0]];
                let y: usize = raw
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad label {raw:?}")))?;
                if y >= c {
                    return Err(Error::data(format!(
                        "line {line}: label {y} out of range for {c} classes"
                    )));
                }
                single.push(y);
            }
            TaskKind::Multi => {
                for &j in &label_idx {
                    let v = match &record[j] {
                        "0" => 0.0,
                        "1" => 1.0,
                        other => {
                            return Err(Error::data(format!(
                                "line {line}: multi-hot label {other:?} is not 0 or 1"
                            )))
                        }
                    };
                    multi.push(v);
                }
            }
        }
    }

    let n = features.len() / d.max(1);
    if n == 0 {
        return Err(Error::data(format!("{} has no data rows", path.display())));
    }
    let labels = match schema.kind {
        TaskKind::Single => Labels::Single(single),
        TaskKind::Multi => Labels::Multi(Matrix::from_vec(n, c, multi)?),
    };
    Dataset::new(Matrix::from_vec(n, d, features)?, labels, c)
}

/// Writes `ds` with the column names of [`TabularSchema::for_dataset`].
pub fn write_tabular(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let schema = TabularSchema::for_dataset(ds);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<&str> = schema
        .feature_columns
        .iter()
        .chain(&schema.label_columns)
        .map(String::as_str)
        .collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        match &ds.labels {
            Labels::Single(y) => row.push(y[i].to_string()),
            Labels::Multi(m) => row.extend(m.row(i).iter().map(|v| format!("{}", *v as u8))),
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
