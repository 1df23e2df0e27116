//! Aggregating a [`VoteMatrix`] into probabilistic labels.
//!
//! Four models: majority vote, a naive-Bayes latent class model fit by EM,
//! a binary method-of-moments model over LF triplets, and an NPLM-inspired
//! partial-label model where votes name sets of classes.

mod em;
mod majority;
mod naive_bayes;
mod partial;
mod problabels;
mod triplet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voter::VoteMatrix;

pub use em::{EmConfig, EmFit, EmParams};
pub use majority::majority_vote;
pub use naive_bayes::{naive_bayes_fit, naive_bayes_log_likelihood, naive_bayes_predict, NbParams};
pub use partial::{partial_fit, partial_label_fit_predict, partial_predict, PartialParams};
pub use problabels::ProbLabels;
pub use triplet::{moments, signed_votes, triplet_fit, triplet_from_moments, triplet_predict, TripletParams};

#[derive(Debug, Error, PartialEq)]
pub enum LabelModelError {
    #[error("label model needs at least 2 classes, got {0}")]
    TooFewClasses(u32),
    #[error("label model needs at least {need} LFs, got {found}")]
    TooFewLfs { need: usize, found: usize },
    #[error("vote matrix has no rows")]
    NoRows,
    #[error("row {row}, LF {lf}: class {class} is outside 1..={k}")]
    ClassOutOfRange { row: usize, lf: usize, class: u32, k: u32 },
    #[error("row {row}, LF {lf}: class-set votes need the partial-label model")]
    SetVote { row: usize, lf: usize },
    #[error("the triplet model needs binary votes (k = 2), got k = {0}")]
    NotBinary(u32),
    #[error("accuracy of LF {0} is unidentifiable: no usable triplet")]
    Unidentifiable(usize),
    #[error("parameters cover {expected} LFs but the matrix has {found}")]
    LfCount { expected: usize, found: usize },
    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },
}

/// Checks every vote lies in 1..=k; with `singletons_only`, also rejects
/// class-set votes.
pub(crate) fn check_votes(votes: &VoteMatrix, k: u32, singletons_only: bool) -> Result<(), LabelModelError> {
    for (row, r) in votes.rows().enumerate() {
        for (lf, v) in r.iter().enumerate() {
            if singletons_only && v.classes().len() > 1 {
                return Err(LabelModelError::SetVote { row, lf });
            }
            if let Some(&class) = v.classes().iter().find(|&&c| c == 0 || c > k) {
                return Err(LabelModelError::ClassOutOfRange { row, lf, class, k });
            }
        }
    }
    Ok(())
}

/// A label model choice with its parameters, as named in task configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelModel {
    Majority,
    NaiveBayes {
        #[serde(default = "default_iters")]
        max_iters: usize,
        #[serde(default = "default_tol")]
        tol: f64,
    },
    Triplet {
        #[serde(default = "default_balance")]
        class_balance: f64,
    },
    Partial {
        #[serde(default = "default_iters")]
        max_iters: usize,
        #[serde(default = "default_tol")]
        tol: f64,
    },
}

fn default_iters() -> usize {
    EmConfig::default().max_iters
}

fn default_tol() -> f64 {
    EmConfig::default().tol
}

fn default_balance() -> f64 {
    0.5
}

impl LabelModel {
    pub fn name(&self) -> &'static str {
        match self {
            LabelModel::Majority => "majority",
            LabelModel::NaiveBayes { .. } => "naive_bayes",
            LabelModel::Triplet { .. } => "triplet",
            LabelModel::Partial { .. } => "partial",
        }
    }

    pub fn fit_predict(&self, votes: &VoteMatrix, k: u32) -> Result<ProbLabels, LabelModelError> {
        match *self {
            LabelModel::Majority => majority_vote(votes, k),
            LabelModel::NaiveBayes { max_iters, tol } => {
                let fit = naive_bayes_fit(votes, k, EmConfig { max_iters, tol })?;
                naive_bayes_predict(votes, &fit.params)
            }
            LabelModel::Triplet { class_balance } => {
                if k != 2 {
                    return Err(LabelModelError::NotBinary(k));
                }
                let params = triplet_fit(votes, class_balance)?;
                triplet_predict(votes, &params)
            }
            LabelModel::Partial { max_iters, tol } => partial_label_fit_predict(votes, k, EmConfig { max_iters, tol }),
        }
    }
}
