use std::collections::BTreeSet;

use crate::voter::VoteMatrix;

use super::em::{self, EmConfig, EmFit, EmParams, Emission};
use super::{check_votes, LabelModelError, ProbLabels};

/// Partial-label parameters. `γ_j` (stored as accuracy) is the probability
/// that the true class lies in the emitted set; within the in-set and
/// out-of-set cases, sets are uniform over LF `j`'s observed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialParams {
    pub k: u32,
    pub em: EmParams,
    /// Distinct sets each LF emitted during fitting.
    pub vocabulary: Vec<BTreeSet<Vec<u32>>>,
}

fn vocabulary(votes: &VoteMatrix) -> Vec<BTreeSet<Vec<u32>>> {
    (0..votes.n_lfs())
        .map(|j| {
            (0..votes.n_rows())
                .map(|i| votes.get(i, j))
                .filter(|v| !v.is_abstain())
                .map(|v| v.classes().to_vec())
                .collect()
        })
        .collect()
}

fn emission(k: u32, vocabulary: &[BTreeSet<Vec<u32>>]) -> Emission {
    let k = k as usize;
    let count = |sets: &BTreeSet<Vec<u32>>, y: usize, inside: bool| {
        sets.iter().filter(|s| s.contains(&(y as u32 + 1)) == inside).count()
    };
    // A zero count is never used: a set containing (or excluding) y was seen.
    let log_inv = |n: usize| if n == 0 { 0.0 } else { -(n as f64).ln() };
    let log_in = vocabulary.iter().map(|s| (0..k).map(|y| log_inv(count(s, y, true))).collect()).collect();
    let log_out = vocabulary.iter().map(|s| (0..k).map(|y| log_inv(count(s, y, false))).collect()).collect();
    Emission { k, log_in, log_out }
}

pub fn partial_fit(votes: &VoteMatrix, k: u32, config: EmConfig) -> Result<EmFit<PartialParams>, LabelModelError> {
    if k < 2 {
        return Err(LabelModelError::TooFewClasses(k));
    }
    if votes.n_rows() == 0 {
        return Err(LabelModelError::NoRows);
    }
    check_votes(votes, k, false)?;
    let vocabulary = vocabulary(votes);
    let fit = em::fit(votes, &emission(k, &vocabulary), config);
    Ok(EmFit {
        params: PartialParams { k, em: fit.params, vocabulary },
        log_likelihood: fit.log_likelihood,
        iterations: fit.iterations,
        converged: fit.converged,
        warning: fit.warning,
    })
}

/// Posterior under fitted parameters. Votes outside an LF's fitted
/// vocabulary are scored as if the vocabulary included them.
pub fn partial_predict(votes: &VoteMatrix, params: &PartialParams) -> Result<ProbLabels, LabelModelError> {
    if votes.n_lfs() != params.vocabulary.len() {
        return Err(LabelModelError::LfCount { expected: params.vocabulary.len(), found: votes.n_lfs() });
    }
    check_votes(votes, params.k, false)?;
    let mut vocab = params.vocabulary.clone();
    for (j, seen) in vocabulary(votes).into_iter().enumerate() {
        vocab[j].extend(seen);
    }
    Ok(emission(params.k, &vocab).posterior(votes, &params.em))
}

pub fn partial_label_fit_predict(votes: &VoteMatrix, k: u32, config: EmConfig) -> Result<ProbLabels, LabelModelError> {
    let fit = partial_fit(votes, k, config)?;
    partial_predict(votes, &fit.params)
}
