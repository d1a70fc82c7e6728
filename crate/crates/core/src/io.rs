//! File formats: dataset CSV, bags/constraints JSON, crowd answers JSON lines
//! and the question map.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::crowd::{CrowdAnswerSet, QuestionMap};
use crate::error::{Error, Result};
use crate::problem::{ConstraintSet, Dataset};

/// Default name of the target column in written datasets.
pub const TARGET_COLUMN: &str = "target";

fn open(path: &Path) -> Result<File> {
    File::open(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))
}

/// Reads a CSV with a header row. Every column other than `target_column`
/// is a numeric feature.
pub fn read_dataset_csv(path: &Path, target_column: Option<&str>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let target_idx = match target_column {
        Some(name) => Some(headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::InvalidDataset(format!(
                "target column '{name}' not found in {}",
                path.display()
            ))
        })?),
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&j| Some(j) != target_idx)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "{} has no feature columns",
            path.display()
        )));
    }

    let mut values = Vec::new();
    let mut targets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::InvalidDataset(format!(
                "row {} has {} fields, header has {}",
                row + 2,
                record.len(),
                headers.len()
            )));
        }
        let parse = |j: usize| -> Result<f64> {
            record[j].parse::<f64>().map_err(|_| {
                Error::InvalidDataset(format!(
                    "row {}, column '{}': '{}' is not a number",
                    row + 2,
                    headers[j],
                    &record[j]
                ))
            })
        };
        for &j in &feature_cols {
            values.push(parse(j)?);
        }
        if let Some(t) = target_idx {
            targets.push(parse(t)?);
        }
    }
    let n = values.len() / feature_cols.len();
    if n == 0 {
        return Err(Error::InvalidDataset(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let features = DMatrix::from_row_slice(n, feature_cols.len(), &values);
    let names = feature_cols.iter().map(|&j| headers[j].clone()).collect();
    let dataset = Dataset::new(features, names)?;
    match target_idx {
        Some(_) => dataset.with_targets(DVector::from_vec(targets)),
        None => Ok(dataset),
    }
}

/// Whether the CSV header names `column`.
pub fn csv_has_column(path: &Path, column: &str) -> Result<bool> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(open(path)?));
    Ok(reader.headers()?.iter().any(|h| h == column))
}

/// Writes features followed by a `target` column when targets are present.
pub fn write_dataset_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = dataset.feature_names().iter().map(String::as_str).collect();
    if dataset.targets().is_some() {
        header.push(TARGET_COLUMN);
    }
    writer.write_record(&header)?;
    let x = dataset.features();
    for i in 0..dataset.n_rows() {
        let mut record: Vec<String> = (0..x.ncols()).map(|j| x[(i, j)].to_string()).collect();
        if let Some(t) = dataset.targets() {
            record.push(t[i].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?))
        .map_err(|e| Error::InvalidArgument(format!("{what} {}: {e}", path.display())))
}

/// Bags/constraints document. A bags-only file is a constraint set with no
/// constraints.
pub fn read_constraints(path: &Path) -> Result<ConstraintSet> {
    read_json(path, "constraints")
}

/// Question id to bag or bag pair.
pub fn read_questions(path: &Path) -> Result<QuestionMap> {
    read_json(path, "question map")
}

pub fn read_answers(path: &Path) -> Result<CrowdAnswerSet> {
    CrowdAnswerSet::from_jsonl(BufReader::new(open(path)?))
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
