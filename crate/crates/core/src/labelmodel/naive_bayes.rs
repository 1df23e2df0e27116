use crate::voter::VoteMatrix;

use super::em::{self, EmConfig, EmFit, EmParams, Emission};
use super::{check_votes, LabelModelError, ProbLabels};

/// Naive-Bayes parameters: off-class mass of a vote is spread uniformly,
/// `(1 − α_j)/(k − 1)` per wrong class.
#[derive(Debug, Clone, PartialEq)]
pub struct NbParams {
    pub k: u32,
    pub em: EmParams,
}

impl NbParams {
    pub fn prior(&self) -> &[f64] {
        &self.em.prior
    }

    pub fn propensity(&self) -> &[f64] {
        &self.em.propensity
    }

    pub fn accuracy(&self) -> &[f64] {
        &self.em.accuracy
    }
}

fn emission(k: u32, m: usize) -> Emission {
    let k = k as usize;
    let out = -((k - 1) as f64).ln();
    Emission { k, log_in: vec![vec![0.0; k]; m], log_out: vec![vec![out; k]; m] }
}

fn validate(votes: &VoteMatrix, k: u32) -> Result<(), LabelModelError> {
    if k < 2 {
        return Err(LabelModelError::TooFewClasses(k));
    }
    if votes.n_rows() == 0 {
        return Err(LabelModelError::NoRows);
    }
    if votes.n_lfs() == 0 {
        return Err(LabelModelError::TooFewLfs { need: 1, found: 0 });
    }
    check_votes(votes, k, true)
}

pub fn naive_bayes_fit(votes: &VoteMatrix, k: u32, config: EmConfig) -> Result<EmFit<NbParams>, LabelModelError> {
    validate(votes, k)?;
    let fit = em::fit(votes, &emission(k, votes.n_lfs()), config);
    Ok(EmFit {
        params: NbParams { k, em: fit.params },
        log_likelihood: fit.log_likelihood,
        iterations: fit.iterations,
        converged: fit.converged,
        warning: fit.warning,
    })
}

/// Per-row posterior under `params`. All-abstain rows get the prior.
pub fn naive_bayes_predict(votes: &VoteMatrix, params: &NbParams) -> Result<ProbLabels, LabelModelError> {
    if votes.n_lfs() != params.em.accuracy.len() {
        return Err(LabelModelError::LfCount { expected: params.em.accuracy.len(), found: votes.n_lfs() });
    }
    check_votes(votes, params.k, true)?;
    Ok(emission(params.k, votes.n_lfs()).posterior(votes, &params.em))
}

/// Log-likelihood of `votes` under `params`, propensity terms included.
pub fn naive_bayes_log_likelihood(votes: &VoteMatrix, params: &NbParams) -> f64 {
    emission(params.k, votes.n_lfs()).log_likelihood(votes, &params.em)
}
