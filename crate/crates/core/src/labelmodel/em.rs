//! EM shared by the naive-Bayes and partial-label models.
//!
//! Both models emit, for LF `j` and latent class `y`, a vote `S` (a class or
//! class-set) with probability `β_j · acc_j · u_in(j, y)` when `y ∈ S` and
//! `β_j · (1 − acc_j) · u_out(j, y)` otherwise. The two models differ only in
//! the normalizers `u_in`, `u_out`.

use crate::voter::VoteMatrix;

use super::majority::majority_vote;
use super::problabels::{log_sum_exp, sorted_sum, ProbLabels};

/// Lower bound on the empirical propensity, so `β_j > 0`.
pub(crate) const MIN_PROPENSITY: f64 = 1e-6;
/// Margin keeping accuracies strictly inside `(1/k, 1)`.
pub(crate) const ACC_EPS: f64 = 1e-4;
const INIT_ACC_RANGE: (f64, f64) = (0.55, 0.95);
/// Slack for the log-likelihood monotonicity check.
const LL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig { max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmParams {
    /// Class prior π.
    pub prior: Vec<f64>,
    /// β_j = P(LF j votes).
    pub propensity: Vec<f64>,
    /// α_j (naive Bayes) or γ_j (partial): P(Y ∈ vote | LF j votes).
    pub accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit<P> {
    pub params: P,
    /// Log-likelihood of the initial parameters, then after each iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the fit fell back to prior-only parameters.
    pub warning: Option<String>,
}

/// Per-(LF, class) log normalizers.
pub(crate) struct Emission {
    pub k: usize,
    pub log_in: Vec<Vec<f64>>,
    pub log_out: Vec<Vec<f64>>,
}

impl Emission {
    fn log_g(&self, j: usize, members: &[u32], y: usize, acc: f64) -> f64 {
        if members.contains(&(y as u32 + 1)) {
            acc.ln() + self.log_in[j][y]
        } else {
            (1.0 - acc).ln() + self.log_out[j][y]
        }
    }

    /// Unnormalized log posterior over classes for row `i`, without the
    /// class-independent propensity terms.
    pub fn row_scores(&self, votes: &VoteMatrix, i: usize, params: &EmParams) -> Vec<f64> {
        let row = votes.row(i);
        (0..self.k)
            .map(|y| {
                let votes = row
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| !v.is_abstain())
                    .map(|(j, v)| self.log_g(j, v.classes(), y, params.accuracy[j]));
                sorted_sum(std::iter::once(params.prior[y].ln()).chain(votes))
            })
            .collect()
    }

    pub fn posterior(&self, votes: &VoteMatrix, params: &EmParams) -> ProbLabels {
        ProbLabels::from_log_scores((0..votes.n_rows()).map(|i| self.row_scores(votes, i, params)), self.k)
    }

    pub fn log_likelihood(&self, votes: &VoteMatrix, params: &EmParams) -> f64 {
        let mut ll = 0.0;
        for i in 0..votes.n_rows() {
            for (j, v) in votes.row(i).iter().enumerate() {
                let b = params.propensity[j];
                ll += if v.is_abstain() { (1.0 - b).ln() } else { b.ln() };
            }
            ll += log_sum_exp(&self.row_scores(votes, i, params));
        }
        ll
    }
}

fn clamp_acc(a: f64, k: usize) -> f64 {
    a.clamp(1.0 / k as f64 + ACC_EPS, 1.0 - ACC_EPS)
}

fn propensities(votes: &VoteMatrix) -> Vec<f64> {
    votes.lf_coverage().into_iter().map(|b| b.max(MIN_PROPENSITY)).collect()
}

/// π uniform, β empirical, accuracy from agreement with majority vote.
fn init(votes: &VoteMatrix, k: usize) -> EmParams {
    let mv = majority_vote(votes, k as u32).expect("votes checked by caller");
    let accuracy = (0..votes.n_lfs())
        .map(|j| {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..votes.n_rows() {
                let v = votes.get(i, j);
                if !v.is_abstain() {
                    sum += sorted_sum(v.classes().iter().map(|&c| mv.row(i)[c as usize - 1]));
                    count += 1;
                }
            }
            let agreement = if count == 0 { INIT_ACC_RANGE.0 } else { sum / count as f64 };
            clamp_acc(agreement.clamp(INIT_ACC_RANGE.0, INIT_ACC_RANGE.1), k)
        })
        .collect();
    EmParams { prior: vec![1.0 / k as f64; k], propensity: propensities(votes), accuracy }
}

fn m_step(votes: &VoteMatrix, post: &ProbLabels, previous: &EmParams, k: usize) -> EmParams {
    let n = votes.n_rows() as f64;
    let mut prior = vec![0.0; k];
    for r in post.rows() {
        for (p, q) in prior.iter_mut().zip(r) {
            *p += q;
        }
    }
    prior.iter_mut().for_each(|p| *p /= n);

    let accuracy = (0..votes.n_lfs())
        .map(|j| {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..votes.n_rows() {
                let v = votes.get(i, j);
                if !v.is_abstain() {
                    sum += sorted_sum(v.classes().iter().map(|&c| post.row(i)[c as usize - 1]));
                    count += 1;
                }
            }
            if count == 0 {
                previous.accuracy[j]
            } else {
                clamp_acc(sum / count as f64, k)
            }
        })
        .collect();
    EmParams { prior, propensity: previous.propensity.clone(), accuracy }
}

fn max_delta(a: &EmParams, b: &EmParams) -> f64 {
    let pairs = a.prior.iter().zip(&b.prior).chain(a.accuracy.iter().zip(&b.accuracy));
    pairs.map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Runs EM from the deterministic initialization. Panics if the
/// log-likelihood decreases, which would indicate a bug in the updates.
pub(crate) fn fit(votes: &VoteMatrix, emission: &Emission, config: EmConfig) -> EmFit<EmParams> {
    let k = emission.k;
    let mut params = init(votes, k);
    if votes.rows().all(|r| r.iter().all(|v| v.is_abstain())) {
        let message = "every LF abstains on every row; returning prior-only parameters".to_string();
        log::warn!("{message}");
        return EmFit { params, log_likelihood: vec![], iterations: 0, converged: true, warning: Some(message) };
    }
    let mut trace = vec![emission.log_likelihood(votes, &params)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let post = emission.posterior(votes, &params);
        let next = m_step(votes, &post, &params, k);
        let ll = emission.log_likelihood(votes, &next);
        let prev = *trace.last().expect("trace starts non-empty");
        assert!(
            ll >= prev - LL_SLACK * (1.0 + prev.abs()),
            "EM log-likelihood decreased at iteration {iterations}: {prev} -> {ll}"
        );
        trace.push(ll);
        let delta = max_delta(&params, &next);
        params = next;
        if delta < config.tol {
            converged = true;
            break;
        }
    }
    EmFit { params, log_likelihood: trace, iterations, converged, warning: None }
}
