use crate::voter::VoteMatrix;

use super::problabels::sorted_sum;
use super::{check_votes, LabelModelError, ProbLabels};

/// Normalized vote counts per row. A class-set vote adds `1/|S|` to each
/// member; rows where every LF abstains are uniform.
pub fn majority_vote(votes: &VoteMatrix, k: u32) -> Result<ProbLabels, LabelModelError> {
    check_votes(votes, k, false)?;
    let k = k as usize;
    let rows = votes.rows().map(|r| {
        let mut shares: Vec<Vec<f64>> = vec![Vec::new(); k];
        for v in r {
            let members = v.classes();
            for &c in members {
                shares[c as usize - 1].push(1.0 / members.len() as f64);
            }
        }
        let mut counts: Vec<f64> = shares.into_iter().map(sorted_sum).collect();
        let total = sorted_sum(counts.iter().copied());
        if total > 0.0 {
            counts.iter_mut().for_each(|c| *c /= total);
        } else {
            counts.fill(1.0 / k as f64);
        }
        counts
    });
    Ok(ProbLabels::from_rows_unchecked(rows.collect::<Vec<_>>(), k))
}
