//! Greedy soup on a toy objective: two checkpoints either side of the optimum
//! average to a better model than either alone.

use fuselite::tensor::Tensor;
use fuselite::trainer::{greedy_soup, CheckpointRecord};

fn main() -> fuselite::Result<()> {
    let score = |w: &[Tensor]| -(w[0].data()[0] - 1.0).powi(2);
    let cps: Vec<CheckpointRecord> = [(1, 0.0), (2, 2.0), (3, 3.5)]
        .into_iter()
        .map(|(step, x)| {
            let weights = vec![Tensor::new(vec![1], vec![x])];
            CheckpointRecord {
                step,
                val_score: score(&weights),
                weights,
            }
        })
        .collect();
    let soup = greedy_soup(&cps, |w| Ok(score(w)))?;
    println!(
        "members {:?}, score {:.3}, weight {}",
        soup.members,
        soup.score + 0.0,
        soup.weights[0].data()[0]
    );
    Ok(())
}
