use std::fmt::Write as _;

use serde_json::json;

use super::LabelModelError;

/// Row-major `n × k` matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbLabels {
    probs: Vec<f64>,
    k: usize,
}

const ROW_SUM_TOL: f64 = 1e-9;

impl ProbLabels {
    /// Validates that every row is a distribution.
    pub fn new(rows: Vec<Vec<f64>>, k: usize) -> Result<Self, LabelModelError> {
        for (row, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(LabelModelError::InvalidRow { row, message: format!("{} entries, expected {k}", r.len()) });
            }
            if r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(LabelModelError::InvalidRow { row, message: "entry outside [0, 1]".into() });
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(LabelModelError::InvalidRow { row, message: format!("sums to {sum}") });
            }
        }
        Ok(ProbLabels { probs: rows.into_iter().flatten().collect(), k })
    }

    /// Builds from unnormalized log scores, one row at a time.
    pub(crate) fn from_log_scores(rows: impl IntoIterator<Item = Vec<f64>>, k: usize) -> Self {
        let mut probs = Vec::new();
        for r in rows {
            debug_assert_eq!(r.len(), k);
            probs.extend(normalize_log(&r));
        }
        ProbLabels { probs, k }
    }

    pub(crate) fn from_rows_unchecked(rows: impl IntoIterator<Item = Vec<f64>>, k: usize) -> Self {
        ProbLabels { probs: rows.into_iter().flatten().collect(), k }
    }

    pub fn n_rows(&self) -> usize {
        self.probs.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.probs.chunks(self.k.max(1))
    }

    /// Predicted class (1-based); ties go to the lowest class.
    pub fn predict(&self, i: usize) -> u32 {
        crate::query::argmax(self.row(i)) as u32 + 1
    }

    pub fn predictions(&self) -> Vec<u32> {
        (0..self.n_rows()).map(|i| self.predict(i)).collect()
    }

    /// Fraction of rows whose prediction equals `gold` (1-based classes).
    pub fn accuracy(&self, gold: &[u32]) -> f64 {
        assert_eq!(gold.len(), self.n_rows(), "gold length");
        if gold.is_empty() {
            return 0.0;
        }
        gold.iter().enumerate().filter(|&(i, &g)| self.predict(i) == g).count() as f64 / gold.len() as f64
    }

    /// Columns permuted so that new column `c` is old column `perm[c]`.
    pub fn permute_columns(&self, perm: &[usize]) -> ProbLabels {
        ProbLabels::from_rows_unchecked(self.rows().map(|r| perm.iter().map(|&c| r[c]).collect()), self.k)
    }

    /// CSV with header `id,p_<class>...`.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        assert_eq!(class_names.len(), self.k, "one name per class");
        let mut out = String::from("id");
        for c in class_names {
            out.push_str(",p_");
            out.push_str(c);
        }
        out.push('\n');
        for (i, r) in self.rows().enumerate() {
            write!(out, "{i}").unwrap();
            for p in r {
                write!(out, ",{p}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses the [`ProbLabels::to_csv`] format; returns class names too.
    pub fn from_csv(text: &str) -> Result<(ProbLabels, Vec<String>), LabelModelError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().unwrap_or("");
        let names: Vec<String> =
            header.split(',').skip(1).map(|h| h.trim().strip_prefix("p_").unwrap_or(h.trim()).to_string()).collect();
        let rows = lines
            .enumerate()
            .map(|(row, l)| {
                l.split(',')
                    .skip(1)
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| LabelModelError::InvalidRow { row, message: e.to_string() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let k = names.len();
        Ok((ProbLabels::new(rows, k)?, names))
    }

    /// One JSON object per line: `{"id":i,"probs":{"<class>":p,...}}`.
    pub fn to_jsonl(&self, class_names: &[String]) -> String {
        assert_eq!(class_names.len(), self.k, "one name per class");
        let mut out = String::new();
        for (i, r) in self.rows().enumerate() {
            let probs: serde_json::Map<String, serde_json::Value> =
                class_names.iter().zip(r).map(|(c, p)| (c.clone(), json!(p))).collect();
            out.push_str(&crate::canonical::to_canonical_string(&json!({ "id": i, "probs": probs })));
            out.push('\n');
        }
        out
    }
}

/// Softmax of log scores; `-inf` entries get probability 0.
/// Sum of `terms` in ascending order, so the result does not depend on the
/// order the terms arrive in (LF columns, class ids).
pub(crate) fn sorted_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut terms: Vec<f64> = terms.into_iter().collect();
    terms.sort_unstable_by(f64::total_cmp);
    terms.into_iter().sum()
}

pub(crate) fn normalize_log(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / scores.len() as f64; scores.len()];
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total = sorted_sum(exps.iter().copied());
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + sorted_sum(scores.iter().map(|s| (s - max).exp())).ln()
}
