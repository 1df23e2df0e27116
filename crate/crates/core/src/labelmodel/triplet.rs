//! Binary method-of-moments model. With votes `λ_j ∈ {−1, +1}` and
//! conditionally independent LFs, `E[λ_j λ_l] = a_j a_l` where
//! `a_j = E[λ_j Y]`, so any triplet identifies `|a_j|` in closed form.

use crate::voter::{Vote, VoteMatrix};

use super::problabels::sorted_sum;
use super::{LabelModelError, ProbLabels};

const ACC_RANGE: (f64, f64) = (0.01, 0.99);
const MIN_DENOMINATOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletParams {
    /// a_j = E[λ_j · Y] over non-abstains.
    pub accuracies: Vec<f64>,
    /// P(Y = +1), i.e. of class 1.
    pub class_balance: f64,
}

/// Class 1 maps to +1, class 2 to −1, abstain to 0.
pub fn signed_votes(votes: &VoteMatrix) -> Result<Vec<Vec<i8>>, LabelModelError> {
    if votes.k() > 2 {
        return Err(LabelModelError::NotBinary(votes.k()));
    }
    votes
        .rows()
        .enumerate()
        .map(|(row, r)| {
            r.iter()
                .enumerate()
                .map(|(lf, v)| match v {
                    Vote::Abstain => Ok(0),
                    Vote::Class(1) => Ok(1),
                    Vote::Class(2) => Ok(-1),
                    Vote::Class(class) => Err(LabelModelError::ClassOutOfRange { row, lf, class: *class, k: 2 }),
                    Vote::Set(_) => Err(LabelModelError::SetVote { row, lf }),
                })
                .collect()
        })
        .collect()
}

/// `M[j][l]` = mean of `λ_j λ_l` over rows where both vote; `None` when
/// they never co-vote. The diagonal is `None`.
pub fn moments(signed: &[Vec<i8>], m: usize) -> Vec<Vec<Option<f64>>> {
    let mut sum = vec![vec![0i64; m]; m];
    let mut count = vec![vec![0u64; m]; m];
    for r in signed {
        for j in 0..m {
            if r[j] == 0 {
                continue;
            }
            for l in j + 1..m {
                if r[l] != 0 {
                    sum[j][l] += i64::from(r[j] * r[l]);
                    count[j][l] += 1;
                }
            }
        }
    }
    let mut out = vec![vec![None; m]; m];
    for j in 0..m {
        for l in j + 1..m {
            if count[j][l] > 0 {
                let v = sum[j][l] as f64 / count[j][l] as f64;
                out[j][l] = Some(v);
                out[l][j] = Some(v);
            }
        }
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Accuracies from a symmetric moment matrix: for each `j`, the median over
/// pairs `l < s` (both ≠ j) of `sqrt(|M_jl M_js / M_ls|)`, clamped to
/// [0.01, 0.99]. Triplets with a missing moment or `|M_ls| < 1e-8` are
/// skipped.
pub fn triplet_from_moments(
    moments: &[Vec<Option<f64>>],
    class_balance: f64,
) -> Result<TripletParams, LabelModelError> {
    let m = moments.len();
    if m < 3 {
        return Err(LabelModelError::TooFewLfs { need: 3, found: m });
    }
    let accuracies = (0..m)
        .map(|j| {
            let mut estimates = Vec::new();
            for l in (0..m).filter(|&l| l != j) {
                for s in (l + 1..m).filter(|&s| s != j) {
                    let (Some(jl), Some(js), Some(ls)) = (moments[j][l], moments[j][s], moments[l][s]) else {
                        continue;
                    };
                    if ls.abs() < MIN_DENOMINATOR {
                        continue;
                    }
                    estimates.push((jl * js / ls).abs().sqrt());
                }
            }
            if estimates.is_empty() {
                return Err(LabelModelError::Unidentifiable(j));
            }
            Ok(median(estimates).clamp(ACC_RANGE.0, ACC_RANGE.1))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TripletParams { accuracies, class_balance })
}

pub fn triplet_fit(votes: &VoteMatrix, class_balance: f64) -> Result<TripletParams, LabelModelError> {
    let signed = signed_votes(votes)?;
    triplet_from_moments(&moments(&signed, votes.n_lfs()), class_balance)
}

/// Naive-Bayes posterior with `P(λ_j = Y | λ_j ≠ 0) = (1 + a_j)/2`.
/// Column 0 is class 1 (+1).
pub fn triplet_predict(votes: &VoteMatrix, params: &TripletParams) -> Result<ProbLabels, LabelModelError> {
    if votes.n_lfs() != params.accuracies.len() {
        return Err(LabelModelError::LfCount { expected: params.accuracies.len(), found: votes.n_lfs() });
    }
    let signed = signed_votes(votes)?;
    let p = params.class_balance;
    let rows = signed.iter().map(|r| {
        let (mut pos, mut neg) = (vec![p.ln()], vec![(1.0 - p).ln()]);
        for (&v, &a) in r.iter().zip(&params.accuracies) {
            let (right, wrong) = (((1.0 + a) / 2.0).ln(), ((1.0 - a) / 2.0).ln());
            match v {
                1 => {
                    pos.push(right);
                    neg.push(wrong);
                }
                -1 => {
                    pos.push(wrong);
                    neg.push(right);
                }
                _ => {}
            }
        }
        vec![sorted_sum(pos), sorted_sum(neg)]
    });
    Ok(ProbLabels::from_log_scores(rows.collect::<Vec<_>>(), 2))
}
