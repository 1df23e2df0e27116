//! Immutable columnar tables of unlabeled examples.
//!
//! A [`Dataset`] is an ordered set of named, homogeneous columns of equal
//! length. Images are held as path references and only opened by backends
//! at query time.

use std::borrow::Cow;
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no header")]
    NoHeader,
    #[error("line {line}: expected {expected} fields, found {found}")]
    RaggedRow { line: u64, expected: usize, found: usize },
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("empty column name at position {0}")]
    EmptyColumnName(usize),
    #[error("column {column:?} has {found} rows, expected {expected}")]
    LengthMismatch { column: String, expected: usize, found: usize },
    #[error("row {row}: column {column:?} value {value:?} is not a valid {kind}")]
    InvalidCell { row: usize, column: String, kind: ColumnKind, value: String },
    #[error("row {row}: image reference in column {column:?} is empty")]
    EmptyImageRef { row: usize, column: String },
    #[error("type hint for unknown column {0:?}")]
    UnknownHintColumn(String),
    #[error("expected a JSON array of objects")]
    NotAnArray,
    #[error("row {0}: expected a flat JSON object")]
    NotAnObject(usize),
    #[error("row {row}: inconsistent keys (missing {missing:?}, unexpected {unexpected:?})")]
    InconsistentKeys { row: usize, missing: Vec<String>, unexpected: Vec<String> },
    #[error("row {row}: key {key:?} holds a nested value")]
    NestedValue { row: usize, key: String },
    #[error("row {row}: key {key:?} holds an unsupported value (null or boolean)")]
    UnsupportedValue { row: usize, key: String },
    #[error("column {0:?} mixes strings and numbers")]
    MixedTypes(String),
    #[error("split fraction {0} is outside (0, 1)")]
    InvalidFraction(f64),
    #[error("cannot split a dataset with {0} rows (need at least 2)")]
    TooFewRows(usize),
    #[error("row index {index} out of bounds for {n_rows} rows")]
    RowOutOfBounds { index: usize, n_rows: usize },
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Text,
    Integer,
    Real,
    ImageRef,
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ColumnKind::Text => "text",
            ColumnKind::Integer => "integer",
            ColumnKind::Real => "real",
            ColumnKind::ImageRef => "image_ref",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypedColumn {
    Text(Vec<String>),
    Integer(Vec<i64>),
    Real(Vec<f64>),
    ImageRef(Vec<String>),
}

impl TypedColumn {
    pub fn kind(&self) -> ColumnKind {
        match self {
            TypedColumn::Text(_) => ColumnKind::Text,
            TypedColumn::Integer(_) => ColumnKind::Integer,
            TypedColumn::Real(_) => ColumnKind::Real,
            TypedColumn::ImageRef(_) => ColumnKind::ImageRef,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TypedColumn::Text(v) | TypedColumn::ImageRef(v) => v.len(),
            TypedColumn::Integer(v) => v.len(),
            TypedColumn::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize) -> Option<Value<'_>> {
        Some(match self {
            TypedColumn::Text(v) => Value::Text(v.get(row)?),
            TypedColumn::Integer(v) => Value::Integer(*v.get(row)?),
            TypedColumn::Real(v) => Value::Real(*v.get(row)?),
            TypedColumn::ImageRef(v) => Value::ImageRef(v.get(row)?),
        })
    }

    fn take(&self, indices: &[usize]) -> TypedColumn {
        fn pick<T: Clone>(v: &[T], indices: &[usize]) -> Vec<T> {
            indices.iter().map(|&i| v[i].clone()).collect()
        }
        match self {
            TypedColumn::Text(v) => TypedColumn::Text(pick(v, indices)),
            TypedColumn::Integer(v) => TypedColumn::Integer(pick(v, indices)),
            TypedColumn::Real(v) => TypedColumn::Real(pick(v, indices)),
            TypedColumn::ImageRef(v) => TypedColumn::ImageRef(pick(v, indices)),
        }
    }

    /// Parses raw cells into a column of the given kind.
    pub fn parse(name: &str, kind: ColumnKind, cells: Vec<String>) -> Result<TypedColumn> {
        let invalid = |row: usize, value: &str| DatasetError::InvalidCell {
            row,
            column: name.to_string(),
            kind,
            value: value.to_string(),
        };
        Ok(match kind {
            ColumnKind::Text => TypedColumn::Text(cells),
            ColumnKind::Integer => TypedColumn::Integer(
                cells
                    .iter()
                    .enumerate()
                    .map(|(row, c)| parse_integer(c).ok_or_else(|| invalid(row, c)))
                    .collect::<Result<_>>()?,
            ),
            ColumnKind::Real => TypedColumn::Real(
                cells
                    .iter()
                    .enumerate()
                    .map(|(row, c)| parse_real(c).ok_or_else(|| invalid(row, c)))
                    .collect::<Result<_>>()?,
            ),
            ColumnKind::ImageRef => {
                if let Some(row) = cells.iter().position(|c| c.is_empty()) {
                    return Err(DatasetError::EmptyImageRef { row, column: name.to_string() });
                }
                TypedColumn::ImageRef(cells)
            }
        })
    }
}

fn parse_integer(cell: &str) -> Option<i64> {
    cell.parse().ok()
}

fn parse_real(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Integer if every cell parses as an integer, else real if every cell
/// parses as a finite real, else text. Empty columns are text.
pub fn infer_kind<'a>(mut cells: impl Iterator<Item = &'a str> + Clone) -> ColumnKind {
    if cells.clone().next().is_none() {
        ColumnKind::Text
    } else if cells.clone().all(|c| parse_integer(c).is_some()) {
        ColumnKind::Integer
    } else if cells.all(|c| parse_real(c).is_some()) {
        ColumnKind::Real
    } else {
        ColumnKind::Text
    }
}

/// A borrowed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value<'a> {
    Text(&'a str),
    Integer(i64),
    Real(f64),
    ImageRef(&'a str),
}

impl<'a> Value<'a> {
    /// Canonical text rendering: text and paths verbatim, numbers in
    /// shortest round-trip decimal form.
    pub fn render(&self) -> Cow<'a, str> {
        match *self {
            Value::Text(s) | Value::ImageRef(s) => Cow::Borrowed(s),
            Value::Integer(i) => Cow::Owned(i.to_string()),
            Value::Real(x) => Cow::Owned(x.to_string()),
        }
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            Value::Text(_) => ColumnKind::Text,
            Value::Integer(_) => ColumnKind::Integer,
            Value::Real(_) => ColumnKind::Real,
            Value::ImageRef(_) => ColumnKind::ImageRef,
        }
    }
}

/// Anything that can look up a cell by column name.
pub trait RowSource {
    fn cell(&self, key: &str) -> Option<Value<'_>>;
}

impl RowSource for HashMap<String, String> {
    fn cell(&self, key: &str) -> Option<Value<'_>> {
        self.get(key).map(|s| Value::Text(s))
    }
}

impl RowSource for IndexMap<String, String> {
    fn cell(&self, key: &str) -> Option<Value<'_>> {
        self.get(key).map(|s| Value::Text(s))
    }
}

impl RowSource for [(&str, &str)] {
    fn cell(&self, key: &str) -> Option<Value<'_>> {
        self.iter().find(|(k, _)| *k == key).map(|(_, v)| Value::Text(v))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Row<'a> {
    dataset: &'a Dataset,
    index: usize,
}

impl<'a> Row<'a> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn get(&self, column: &str) -> Option<Value<'a>> {
        self.dataset.columns.get(column)?.get(self.index)
    }
}

impl RowSource for Row<'_> {
    fn cell(&self, key: &str) -> Option<Value<'_>> {
        self.get(key)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    columns: IndexMap<String, TypedColumn>,
    n_rows: usize,
}

impl Dataset {
    /// Builds a dataset, checking that names are unique and nonempty and
    /// that all columns have the same length.
    pub fn new(columns: impl IntoIterator<Item = (String, TypedColumn)>) -> Result<Self> {
        let mut map = IndexMap::new();
        let mut n_rows = None;
        for (pos, (name, column)) in columns.into_iter().enumerate() {
            if name.is_empty() {
                return Err(DatasetError::EmptyColumnName(pos));
            }
            let expected = *n_rows.get_or_insert(column.len());
            if column.len() != expected {
                return Err(DatasetError::LengthMismatch { column: name, expected, found: column.len() });
            }
            if let TypedColumn::ImageRef(paths) = &column {
                if let Some(row) = paths.iter().position(|p| p.is_empty()) {
                    return Err(DatasetError::EmptyImageRef { row, column: name });
                }
            }
            if map.contains_key(&name) {
                return Err(DatasetError::DuplicateColumn(name));
            }
            map.insert(name, column);
        }
        Ok(Dataset { columns: map, n_rows: n_rows.unwrap_or(0) })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, name: &str) -> Option<&TypedColumn> {
        self.columns.get(name)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &TypedColumn)> {
        self.columns.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn row(&self, index: usize) -> Result<Row<'_>> {
        if index >= self.n_rows {
            return Err(DatasetError::RowOutOfBounds { index, n_rows: self.n_rows });
        }
        Ok(Row { dataset: self, index })
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> {
        (0..self.n_rows).map(move |index| Row { dataset: self, index })
    }

    /// New dataset holding the given rows, in the given order.
    pub fn take(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&index) = indices.iter().find(|&&i| i >= self.n_rows) {
            return Err(DatasetError::RowOutOfBounds { index, n_rows: self.n_rows });
        }
        Ok(Dataset {
            columns: self.columns.iter().map(|(k, c)| (k.clone(), c.take(indices))).collect(),
            n_rows: indices.len(),
        })
    }

    /// Reinterprets a column as another kind by re-parsing its rendering.
    pub fn with_column_kind(&self, name: &str, kind: ColumnKind) -> Result<Dataset> {
        let column = self.columns.get(name).ok_or_else(|| DatasetError::UnknownHintColumn(name.to_string()))?;
        let cells = (0..self.n_rows).map(|i| column.get(i).expect("row in range").render().into_owned()).collect();
        let mut columns = self.columns.clone();
        columns.insert(name.to_string(), TypedColumn::parse(name, kind, cells)?);
        Ok(Dataset { columns, n_rows: self.n_rows })
    }

    /// Shuffles rows deterministically by `seed` and cuts off the first
    /// `ceil(fraction * n)` rows as the first part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (head, tail) = split_indices(self.n_rows, fraction, seed)?;
        Ok((self.take(&head)?, self.take(&tail)?))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(self.columns.keys())?;
        for i in 0..self.n_rows {
            out.write_record(self.columns.values().map(|c| match c.get(i).expect("row in range") {
                Value::Real(x) => render_real_for_csv(x),
                v => v.render().into_owned(),
            }))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

// Reals keep a decimal point so that re-inference does not turn them into integers.
fn render_real_for_csv(x: f64) -> String {
    let s = x.to_string();
    if s.contains(['.', 'e', 'E']) || !x.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(fraction));
    }
    if n < 2 {
        return Err(DatasetError::TooFewRows(n));
    }
    // Guard against products like 0.3 * 10 = 3.0000000000000004.
    let head = ((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tail = order.split_off(head);
    Ok((order, tail))
}

pub fn load_csv(path: impl AsRef<Path>, type_hints: Option<&HashMap<String, ColumnKind>>) -> Result<Dataset> {
    read_csv(File::open(path)?, type_hints)
}

pub fn read_csv<R: Read>(reader: R, type_hints: Option<&HashMap<String, ColumnKind>>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() {
        return Err(DatasetError::NoHeader);
    }
    let mut seen = BTreeSet::new();
    for (pos, h) in headers.iter().enumerate() {
        if h.is_empty() {
            return Err(DatasetError::EmptyColumnName(pos));
        }
        if !seen.insert(h.as_str()) {
            return Err(DatasetError::DuplicateColumn(h.clone()));
        }
    }
    if let Some(hints) = type_hints {
        if let Some(unknown) = hints.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(DatasetError::UnknownHintColumn(unknown.clone()));
        }
    }

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in rdr.records() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(DatasetError::RaggedRow {
                line: record.position().map_or(0, |p| p.line()),
                expected: headers.len(),
                found: record.len(),
            });
        }
        for (col, field) in cells.iter_mut().zip(record.iter()) {
            col.push(field.to_string());
        }
    }

    let columns = headers
        .into_iter()
        .zip(cells)
        .map(|(name, col)| {
            let kind = type_hints
                .and_then(|h| h.get(&name).copied())
                .unwrap_or_else(|| infer_kind(col.iter().map(String::as_str)));
            let column = TypedColumn::parse(&name, kind, col)?;
            Ok((name, column))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(columns)
}

pub fn load_json(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_json(&text)
}

/// Parses an array of flat objects with identical key sets. Column order
/// follows the sorted key order.
pub fn parse_json(text: &str) -> Result<Dataset> {
    use serde_json::Value as J;

    let rows = match serde_json::from_str::<J>(text)? {
        J::Array(rows) => rows,
        _ => return Err(DatasetError::NotAnArray),
    };
    let Some(first) = rows.first() else {
        return Ok(Dataset::default());
    };
    let keys: Vec<String> = match first {
        J::Object(obj) => obj.keys().cloned().collect(),
        _ => return Err(DatasetError::NotAnObject(0)),
    };

    let mut cells: Vec<Vec<&J>> = vec![Vec::with_capacity(rows.len()); keys.len()];
    for (row, value) in rows.iter().enumerate() {
        let obj = value.as_object().ok_or(DatasetError::NotAnObject(row))?;
        let missing: Vec<String> = keys.iter().filter(|k| !obj.contains_key(*k)).cloned().collect();
        let unexpected: Vec<String> = obj.keys().filter(|k| !keys.contains(k)).cloned().collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(DatasetError::InconsistentKeys { row, missing, unexpected });
        }
        for (col, key) in cells.iter_mut().zip(&keys) {
            let v = &obj[key];
            match v {
                J::Array(_) | J::Object(_) => return Err(DatasetError::NestedValue { row, key: key.clone() }),
                J::Null | J::Bool(_) => return Err(DatasetError::UnsupportedValue { row, key: key.clone() }),
                _ => col.push(v),
            }
        }
    }

    let columns = keys
        .into_iter()
        .zip(cells)
        .map(|(name, col)| {
            let column = if col.iter().all(|v| v.is_string()) {
                TypedColumn::Text(col.iter().map(|v| v.as_str().unwrap().to_string()).collect())
            } else if col.iter().all(|v| v.is_i64()) {
                TypedColumn::Integer(col.iter().map(|v| v.as_i64().unwrap()).collect())
            } else if col.iter().all(|v| v.is_number()) {
                TypedColumn::Real(col.iter().map(|v| v.as_f64().unwrap()).collect())
            } else {
                return Err(DatasetError::MixedTypes(name));
            };
            Ok((name, column))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(columns)
}
