//! Top-1 accuracy of probabilistic labels against gold labels.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use promptws::dataset::{self, TypedColumn};
use promptws::labelmodel::ProbLabels;
use promptws::voter::VoteMatrix;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{probs} probability rows but {gold} gold labels")]
    RowMismatch { probs: usize, gold: usize },
    #[error("votes have {votes} rows but probabilities have {probs}")]
    VoteMismatch { probs: usize, votes: usize },
    #[error("gold row {row}: unknown label {label:?}")]
    UnknownLabel { row: usize, label: String },
    #[error("gold file has no column {0:?}")]
    MissingColumn(String),
    #[error("{0}")]
    Read(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassCounts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassCounts>,
    /// Fraction of rows with at least one non-abstain vote.
    pub coverage: Option<f64>,
}

/// `gold` holds 1-based class ids. Predictions are the argmax of each row,
/// ties going to the lowest class.
pub fn evaluate(
    probs: &ProbLabels,
    class_names: &[String],
    gold: &[u32],
    votes: Option<&VoteMatrix>,
) -> Result<EvalReport, EvalError> {
    if probs.n_rows() != gold.len() {
        return Err(EvalError::RowMismatch { probs: probs.n_rows(), gold: gold.len() });
    }
    if let Some(v) = votes {
        if v.n_rows() != probs.n_rows() {
            return Err(EvalError::VoteMismatch { probs: probs.n_rows(), votes: v.n_rows() });
        }
    }
    let mut per_class = vec![ClassCounts::default(); probs.k()];
    let mut correct = 0;
    for (i, &g) in gold.iter().enumerate() {
        let p = probs.predict(i);
        per_class[g as usize - 1].gold += 1;
        per_class[p as usize - 1].predicted += 1;
        if p == g {
            per_class[g as usize - 1].correct += 1;
            correct += 1;
        }
    }
    Ok(EvalReport {
        n: gold.len(),
        accuracy: if gold.is_empty() { 0.0 } else { correct as f64 / gold.len() as f64 },
        class_names: class_names.to_vec(),
        per_class,
        coverage: votes.map(VoteMatrix::coverage),
    })
}

/// Reads gold labels from a CSV column. Cells may be class names or 1-based
/// class ids. A file with a single column is read regardless of its name.
pub fn load_gold(path: &Path, column: &str, class_names: &[String]) -> Result<Vec<u32>, EvalError> {
    let hints = [(column.to_string(), dataset::ColumnKind::Text)].into_iter().collect();
    let data =
        dataset::load_csv(path, Some(&hints)).map_err(|e| EvalError::Read(format!("{}: {e}", path.display())))?;
    let col = match data.column(column) {
        Some(c) => c,
        None if data.n_columns() == 1 => data.columns().next().expect("one column").1,
        None => return Err(EvalError::MissingColumn(column.to_string())),
    };
    let cells: Vec<String> = match col {
        TypedColumn::Text(v) | TypedColumn::ImageRef(v) => v.clone(),
        TypedColumn::Integer(v) => v.iter().map(i64::to_string).collect(),
        TypedColumn::Real(v) => v.iter().map(f64::to_string).collect(),
    };
    cells
        .iter()
        .enumerate()
        .map(|(row, cell)| {
            let cell = cell.trim();
            if let Some(i) = class_names.iter().position(|c| c == cell) {
                return Ok(i as u32 + 1);
            }
            match cell.parse::<u32>() {
                Ok(id) if id >= 1 && id as usize <= class_names.len() => Ok(id),
                _ => Err(EvalError::UnknownLabel { row, label: cell.to_string() }),
            }
        })
        .collect()
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows: {}", self.n)?;
        writeln!(f, "accuracy: {:.4}", self.accuracy)?;
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>6}  {:>9}  {:>7}", "class", "gold", "predicted", "correct")?;
        for (name, c) in self.class_names.iter().zip(&self.per_class) {
            writeln!(f, "{name:<width$}  {:>6}  {:>9}  {:>7}", c.gold, c.predicted, c.correct)?;
        }
        if let Some(cov) = self.coverage {
            writeln!(f, "vote coverage: {cov:.4}")?;
        }
        Ok(())
    }
}
