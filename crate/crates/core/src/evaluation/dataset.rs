use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Frame};

/// Reserved CSV column holding `id` / `ood` row labels.
pub const SPLIT_COLUMN: &str = "__split__";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),
    #[error("csv line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for DatasetError {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        DatasetError::Csv {
            line,
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Column {
    name: String,
    values: Vec<f64>,
}

/// Named numeric columns with a disjoint ID/OOD row partition.
#[derive(Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    columns: Vec<Column>,
    target: String,
    id_rows: Vec<usize>,
    ood_rows: Vec<usize>,
    time_ordered: bool,
    time_column: Option<String>,
    #[serde(skip)]
    ood_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            name: self.name.clone(),
            columns: self.columns.clone(),
            target: self.target.clone(),
            id_rows: self.id_rows.clone(),
            ood_rows: self.ood_rows.clone(),
            time_ordered: self.time_ordered,
            time_column: self.time_column.clone(),
            ood_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.columns == other.columns
            && self.target == other.target
            && self.id_rows == other.id_rows
            && self.ood_rows == other.ood_rows
            && self.time_ordered == other.time_ordered
            && self.time_column == other.time_column
    }
}

impl Dataset {
    /// `is_ood[i]` marks row `i` as out-of-distribution.
    pub fn new(
        name: &str,
        columns: Vec<(String, Vec<f64>)>,
        target: &str,
        is_ood: &[bool],
        time_ordered: bool,
        time_column: Option<String>,
    ) -> Result<Dataset, DatasetError> {
        let n = is_ood.len();
        let mut seen = Vec::new();
        for (name, values) in &columns {
            if name == SPLIT_COLUMN {
                return Err(DatasetError::Invalid(format!("`{SPLIT_COLUMN}` is reserved")));
            }
            if seen.contains(&name) {
                return Err(DatasetError::Invalid(format!("duplicate column `{name}`")));
            }
            seen.push(name);
            if values.len() != n {
                return Err(DatasetError::Invalid(format!(
                    "column `{name}` has {} rows, expected {n}",
                    values.len()
                )));
            }
            if let Some(row) = values.iter().position(|v| !v.is_finite()) {
                return Err(DatasetError::Invalid(format!(
                    "column `{name}` row {row} is not finite"
                )));
            }
        }
        if !columns.iter().any(|(c, _)| c == target) {
            return Err(DatasetError::Invalid(format!("target column `{target}` missing")));
        }
        if let Some(tc) = &time_column {
            if !columns.iter().any(|(c, _)| c == tc) {
                return Err(DatasetError::Invalid(format!("time column `{tc}` missing")));
            }
        }
        let id_rows: Vec<usize> = (0..n).filter(|&i| !is_ood[i]).collect();
        let ood_rows: Vec<usize> = (0..n).filter(|&i| is_ood[i]).collect();
        if id_rows.is_empty() {
            return Err(DatasetError::Invalid("no ID rows".into()));
        }
        Ok(Dataset {
            name: name.to_string(),
            columns: columns
                .into_iter()
                .map(|(name, values)| Column { name, values })
                .collect(),
            target: target.to_string(),
            id_rows,
            ood_rows,
            time_ordered,
            time_column: time_column.filter(|_| time_ordered),
            ood_reads: AtomicUsize::new(0),
        })
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.id_rows.len() + self.ood_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id_rows(&self) -> &[usize] {
        &self.id_rows
    }

    pub fn ood_rows(&self) -> &[usize] {
        &self.ood_rows
    }

    pub fn is_time_ordered(&self) -> bool {
        self.time_ordered
    }

    pub fn time_column(&self) -> Option<&str> {
        self.time_column.as_deref()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|c| c.name.as_str())
    }

    /// Columns a candidate may reference (everything except the target).
    pub fn feature_names(&self) -> Vec<&str> {
        self.column_names().filter(|c| *c != self.target).collect()
    }

    /// Number of times OOD rows have been materialized.
    pub fn ood_reads(&self) -> usize {
        self.ood_reads.load(Ordering::Relaxed)
    }

    /// Copy with the time-order flag cleared (disables `grad1`).
    pub fn without_time_order(&self) -> Dataset {
        let mut copy = self.clone();
        copy.time_ordered = false;
        copy.time_column = None;
        copy
    }

    fn ordinate(&self) -> Vec<f64> {
        match self.time_column.as_deref().and_then(|c| self.column(c)) {
            Some(t) => t.to_vec(),
            None => (0..self.len()).map(|i| i as f64).collect(),
        }
    }

    pub fn partition(&self, which: Partition) -> PartitionData {
        let rows = match which {
            Partition::Id => &self.id_rows,
            Partition::Ood => {
                self.ood_reads.fetch_add(1, Ordering::Relaxed);
                &self.ood_rows
            }
        };
        let pick = |values: &[f64]| rows.iter().map(|&r| values[r]).collect::<Vec<f64>>();
        let features = self
            .columns
            .iter()
            .filter(|c| c.name != self.target)
            .map(|c| (c.name.clone(), pick(&c.values)))
            .collect();
        let target = pick(self.column(&self.target).expect("validated target"));
        let time = self.time_ordered.then(|| pick(&self.ordinate()));
        PartitionData {
            features,
            target,
            time,
        }
    }

    /// Time derivative of a stored column; requires time-ordered data.
    pub fn numeric_gradient(&self, column: &str) -> Result<Vec<f64>, super::ScoreError> {
        if !self.time_ordered {
            return Err(super::ScoreError::NotTimeOrdered);
        }
        let values = self
            .column(column)
            .ok_or_else(|| EvalError::MissingVariable(column.to_string()))?;
        super::numeric_gradient(values, &self.ordinate())
    }

    pub fn read_csv<R: Read>(
        reader: R,
        name: &str,
        target: &str,
        time_ordered: bool,
        time_column: Option<String>,
    ) -> Result<Dataset, DatasetError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let split_idx = headers
            .iter()
            .position(|h| h == SPLIT_COLUMN)
            .ok_or_else(|| DatasetError::Invalid(format!("missing `{SPLIT_COLUMN}` column")))?;
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        let mut is_ood = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            for (i, field) in record.iter().enumerate() {
                if i == split_idx {
                    is_ood.push(match field {
                        "id" => false,
                        "ood" => true,
                        other => {
                            return Err(DatasetError::Csv {
                                line,
                                message: format!("split label `{other}` is not `id` or `ood`"),
                            })
                        }
                    });
                } else {
                    values[i].push(parse_decimal(field).ok_or_else(|| DatasetError::Csv {
                        line,
                        message: format!("`{field}` in column `{}` is not a finite decimal", headers[i]),
                    })?);
                }
            }
        }
        let columns = headers
            .into_iter()
            .zip(values)
            .enumerate()
            .filter(|(i, _)| *i != split_idx)
            .map(|(_, c)| c)
            .collect();
        Dataset::new(name, columns, target, &is_ood, time_ordered, time_column)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.column_names().collect();
        header.push(SPLIT_COLUMN);
        wtr.write_record(&header)?;
        let mut is_ood = vec![false; self.len()];
        for &r in &self.ood_rows {
            is_ood[r] = true;
        }
        for (row, ood) in is_ood.iter().enumerate() {
            let mut record: Vec<String> =
                self.columns.iter().map(|c| format!("{:?}", c.values[row])).collect();
            record.push(if *ood { "ood" } else { "id" }.to_string());
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Plain decimal with optional exponent; rejects `inf`, `nan`, and separators.
fn parse_decimal(field: &str) -> Option<f64> {
    let body = field.strip_prefix(['+', '-']).unwrap_or(field);
    let ok_chars = body
        .bytes()
        .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'e' | b'E' | b'+' | b'-'));
    if body.is_empty() || !ok_chars || !body.as_bytes()[0].is_ascii_digit() && !body.starts_with('.') {
        return None;
    }
    field.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Rows of one partition, with the target split out.
#[derive(Debug, Clone)]
pub struct PartitionData {
    features: Vec<(String, Vec<f64>)>,
    target: Vec<f64>,
    time: Option<Vec<f64>>,
}

impl PartitionData {
    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn feature(&self, name: &str) -> Option<&[f64]> {
        self.features
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn frame(&self) -> Result<Frame<'_>, EvalError> {
        let frame = Frame::new(self.features.iter().map(|(n, v)| (n.as_str(), v.as_slice())))?;
        match &self.time {
            Some(t) => frame.with_time(t),
            None => Ok(frame),
        }
    }
}
