use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Comparisons of validation scores treat differences up to this as ties.
pub const IMPROVEMENT_TOL: f64 = 1e-12;

/// A stored checkpoint; scores are higher-is-better.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub val_score: f64,
    pub weights: Vec<Tensor>,
}

/// Best first; equal scores keep the earlier step first.
pub fn rank_checkpoints(records: &mut [CheckpointRecord]) {
    records.sort_by(|a, b| {
        b.val_score
            .total_cmp(&a.val_score)
            .then(a.step.cmp(&b.step))
    });
}

/// Inserts `record` and keeps only the `k` best.
pub fn keep_top_k(records: &mut Vec<CheckpointRecord>, record: CheckpointRecord, k: usize) {
    records.push(record);
    rank_checkpoints(records);
    records.truncate(k);
}

/// Uniform elementwise mean of weight sets, summed in the given order.
pub fn average_weights(sets: &[&[Tensor]]) -> Vec<Tensor> {
    let n = sets.len() as f64;
    let mut acc: Vec<Tensor> = sets[0].to_vec();
    for set in &sets[1..] {
        for (a, t) in acc.iter_mut().zip(set.iter()) {
            a.add_assign(t);
        }
    }
    if sets.len() > 1 {
        for a in &mut acc {
            for v in a.data_mut() {
                *v /= n;
            }
        }
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoupResult {
    pub weights: Vec<Tensor>,
    /// Steps of the member checkpoints, in the order they joined.
    pub members: Vec<u64>,
    pub score: f64,
}

/// Greedy soup: start from the best checkpoint and add each following one
/// only if the uniform average of all members scores strictly higher.
pub fn greedy_soup(
    checkpoints: &[CheckpointRecord],
    mut val_eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<SoupResult> {
    let mut ranked: Vec<&CheckpointRecord> = checkpoints
        .iter()
        .filter(|c| c.val_score.is_finite())
        .collect();
    if ranked.is_empty() {
        return Err(Error::NoCheckpoints);
    }
    ranked.sort_by(|a, b| {
        b.val_score
            .total_cmp(&a.val_score)
            .then(a.step.cmp(&b.step))
    });
    let best = ranked[0];
    let mut members = vec![best];
    let mut weights = best.weights.clone();
    let mut score = best.val_score;
    for cand in &ranked[1..] {
        let mut trial: Vec<&[Tensor]> = members.iter().map(|m| m.weights.as_slice()).collect();
        trial.push(&cand.weights);
        let avg = average_weights(&trial);
        let s = val_eval(&avg)?;
        if s > score + IMPROVEMENT_TOL {
            members.push(cand);
            weights = avg;
            score = s;
        }
    }
    Ok(SoupResult {
        weights,
        members: members.iter().map(|m| m.step).collect(),
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, score: f64, w: f64) -> CheckpointRecord {
        CheckpointRecord {
            step,
            val_score: score,
            weights: vec![Tensor::new(vec![1], vec![w])],
        }
    }

    #[test]
    fn identical_checkpoints_yield_one_member() {
        let cps = vec![rec(1, 0.5, 2.0), rec(2, 0.5, 2.0), rec(3, 0.5, 2.0)];
        let r = greedy_soup(&cps, |_| Ok(0.5)).unwrap();
        assert_eq!(r.members, vec![1]);
        assert_eq!(r.weights, cps[0].weights);
    }

    #[test]
    fn single_checkpoint_is_returned() {
        let cps = vec![rec(4, 0.1, -1.0)];
        let r = greedy_soup(&cps, |_| unreachable!()).unwrap();
        assert_eq!(r.weights, cps[0].weights);
        assert!(matches!(
            greedy_soup(&[], |_| Ok(0.0)),
            Err(Error::NoCheckpoints)
        ));
    }

    #[test]
    fn midpoint_objective_admits_both() {
        let target = 1.0;
        let eval = |w: &[Tensor]| Ok(-(w[0].data()[0] - target).powi(2));
        let cps = vec![rec(1, -1.0, 0.0), rec(2, -1.0, 2.0)];
        let r = greedy_soup(&cps, eval).unwrap();
        assert_eq!(r.members.len(), 2);
        assert_eq!(r.weights[0].data(), &[1.0]);
    }

    #[test]
    fn top_k_prefers_earlier_step_on_ties() {
        let mut kept = Vec::new();
        for (s, v) in [(1, 0.5), (2, 0.7), (3, 0.7), (4, 0.6), (5, 0.7)] {
            keep_top_k(&mut kept, rec(s, v, 0.0), 3);
        }
        let steps: Vec<u64> = kept.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![2, 3, 5]);
    }
}
