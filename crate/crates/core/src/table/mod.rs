//! Row tables whose columns may hold numbers, strings, or raw bytes, plus
//! modality and problem-type inference over them.

mod detect;
mod io;
mod split;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use detect::{infer_column_modality, infer_problem_type, DetectionThresholds};
pub use io::{load_table, read_binary, read_csv, write_binary, write_csv, CsvOptions};
pub use split::{drop_null_labels, split_indices, split_train_val};

/// A single table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Null,
    Number(f64),
    Text(String),
    Bytes(Vec<u8>),
}

impl Cell {
    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }

    /// Numeric value of the cell, parsing strings. Non-finite values are
    /// treated as unparseable.
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Cell::Number(x) if x.is_finite() => Some(*x),
            Cell::Text(s) => s.trim().parse::<f64>().ok().filter(|x| x.is_finite()),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    /// Canonical string key used for categorical identity. `Number(1.0)` and
    /// `Text("1")` share the key `"1"`.
    pub fn key(&self) -> Option<String> {
        match self {
            Cell::Null => None,
            Cell::Number(x) => Some(number_key(*x)),
            Cell::Text(s) => Some(s.clone()),
            Cell::Bytes(b) => {
                let mut h = DefaultHasher::new();
                b.hash(&mut h);
                Some(format!("bytes:{:016x}:{}", h.finish(), b.len()))
            }
        }
    }
}

pub(crate) fn number_key(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => Ok(()),
            Cell::Number(x) => f.write_str(&number_key(*x)),
            Cell::Text(s) => f.write_str(s),
            Cell::Bytes(b) => {
                use base64::Engine;
                f.write_str(&base64::engine::general_purpose::STANDARD.encode(b))
            }
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Number(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<Vec<u8>> for Cell {
    fn from(b: Vec<u8>) -> Self {
        Cell::Bytes(b)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Null, Into::into)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<Cell>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<Cell>) -> Self {
        Column {
            name: name.into(),
            values,
        }
    }
}

/// Per-column modality annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnModality {
    Numeric,
    Categorical,
    Text,
    ImagePath,
    ImageBytes,
    ImageBase64,
    NonInformative,
}

impl ColumnModality {
    pub fn is_image(self) -> bool {
        matches!(
            self,
            ColumnModality::ImagePath | ColumnModality::ImageBytes | ColumnModality::ImageBase64
        )
    }

    pub fn group(self) -> Option<ModalityGroup> {
        match self {
            ColumnModality::Numeric | ColumnModality::Categorical => Some(ModalityGroup::Tabular),
            ColumnModality::Text => Some(ModalityGroup::Text),
            ColumnModality::ImagePath
            | ColumnModality::ImageBytes
            | ColumnModality::ImageBase64 => Some(ModalityGroup::Image),
            ColumnModality::NonInformative => None,
        }
    }
}

/// The backbone family a modality is routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityGroup {
    Image,
    Text,
    Tabular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemType {
    Binary,
    Multiclass,
    Regression,
    /// Text-to-text matching.
    Ttm,
    /// Image-to-image matching.
    Iim,
    /// Image-to-text matching. Text-to-image retrieval is the same model
    /// evaluated with the query direction reversed.
    Itm,
}

impl ProblemType {
    pub fn is_classification(self) -> bool {
        matches!(self, ProblemType::Binary | ProblemType::Multiclass)
    }

    pub fn is_matching(self) -> bool {
        matches!(self, ProblemType::Ttm | ProblemType::Iim | ProblemType::Itm)
    }
}

impl fmt::Display for ProblemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ProblemType::Binary => "binary",
            ProblemType::Multiclass => "multiclass",
            ProblemType::Regression => "regression",
            ProblemType::Ttm => "ttm",
            ProblemType::Iim => "iim",
            ProblemType::Itm => "itm",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub modality: ColumnModality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<ColumnSchema>,
    pub label_column: Option<String>,
    pub problem_type: ProblemType,
}

impl TableSchema {
    /// Infers every non-label column's modality.
    pub fn infer(
        table: &MultimodalTable,
        label: Option<&str>,
        problem_type: ProblemType,
        thresholds: &DetectionThresholds,
    ) -> Result<Self> {
        if let Some(l) = label {
            if table.column(l).is_none() {
                return Err(Error::MissingLabelColumn(l.to_string()));
            }
        }
        let mut columns = Vec::new();
        for col in table.columns() {
            if Some(col.name.as_str()) == label {
                continue;
            }
            let modality = infer_column_modality(&col.values, thresholds)
                .map_err(|_| Error::EmptyColumn(col.name.clone()))?;
            columns.push(ColumnSchema {
                name: col.name.clone(),
                modality,
            });
        }
        Ok(TableSchema {
            columns,
            label_column: label.map(str::to_string),
            problem_type,
        })
    }

    pub fn modality(&self, name: &str) -> Option<ColumnModality> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.modality)
    }

    pub fn feature_columns(&self) -> impl Iterator<Item = &ColumnSchema> {
        self.columns
            .iter()
            .filter(|c| c.modality != ColumnModality::NonInformative)
    }
}

/// Column-major table with unique column names and equal column lengths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultimodalTable {
    columns: Vec<Column>,
    n_rows: usize,
    image_root: Option<PathBuf>,
}

impl MultimodalTable {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, |c| c.values.len());
        let mut seen = HashSet::new();
        for c in &columns {
            if c.values.len() != n_rows {
                return Err(Error::InvalidTable(format!(
                    "column `{}` has {} cells, expected {}",
                    c.name,
                    c.values.len(),
                    n_rows
                )));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidTable(format!(
                    "duplicate column name `{}`",
                    c.name
                )));
            }
        }
        Ok(MultimodalTable {
            columns,
            n_rows,
            image_root: None,
        })
    }

    /// Directory that relative image paths are resolved against.
    pub fn with_image_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.image_root = Some(root.into());
        self
    }

    pub fn image_root(&self) -> Option<&Path> {
        self.image_root.as_deref()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn cell(&self, column: &str, row: usize) -> Option<&Cell> {
        self.column(column).and_then(|c| c.values.get(row))
    }

    pub fn push_column(&mut self, column: Column) -> Result<()> {
        if !self.columns.is_empty() && column.values.len() != self.n_rows {
            return Err(Error::InvalidTable(format!(
                "column `{}` has {} cells, expected {}",
                column.name,
                column.values.len(),
                self.n_rows
            )));
        }
        if self.column(&column.name).is_some() {
            return Err(Error::InvalidTable(format!(
                "duplicate column name `{}`",
                column.name
            )));
        }
        if self.columns.is_empty() {
            self.n_rows = column.values.len();
        }
        self.columns.push(column);
        Ok(())
    }

    pub fn without_column(&self, name: &str) -> Self {
        MultimodalTable {
            columns: self
                .columns
                .iter()
                .filter(|c| c.name != name)
                .cloned()
                .collect(),
            n_rows: self.n_rows,
            image_root: self.image_root.clone(),
        }
    }

    /// New table with the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        MultimodalTable {
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    values: rows.iter().map(|&r| c.values[r].clone()).collect(),
                })
                .collect(),
            n_rows: rows.len(),
            image_root: self.image_root.clone(),
        }
    }

    /// Appends the rows of `other`, which must have the same column names.
    pub fn concat(&self, other: &MultimodalTable) -> Result<Self> {
        if self.column_names() != other.column_names() {
            return Err(Error::InvalidTable(
                "cannot concatenate tables with different columns".into(),
            ));
        }
        let columns = self
            .columns
            .iter()
            .zip(&other.columns)
            .map(|(a, b)| Column {
                name: a.name.clone(),
                values: a.values.iter().chain(&b.values).cloned().collect(),
            })
            .collect();
        Ok(MultimodalTable {
            columns,
            n_rows: self.n_rows + other.n_rows,
            image_root: self.image_root.clone(),
        })
    }
}
