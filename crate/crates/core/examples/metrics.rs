//! The evaluation metrics on small hand-checkable inputs.

use fuselite::metrics::{f1_binary, f1_weighted, r2, recall_at_k, roc_auc, DEFAULT_K_VALUES};

fn main() -> fuselite::Result<()> {
    println!("r2          {}", r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])?);
    println!(
        "f1          {:.4}",
        f1_binary(&[1, 1, 0, 0], &[1, 0, 0, 0], &1)?
    );
    println!(
        "f1_weighted {:.4}",
        f1_weighted(&["A", "A", "B", "B"], &["A", "B", "B", "B"])?
    );
    println!(
        "roc_auc     {}",
        roc_auc(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1])?
    );

    // Five gallery items beat the true match, which sits sixth.
    let q = vec![vec![1.0, 0.0]];
    let mut g: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, 0.0]).collect();
    g.push(vec![1.0, 0.5]);
    g.extend((0..4).map(|_| vec![0.0, 1.0]));
    println!(
        "recall@{DEFAULT_K_VALUES:?} {:?}",
        recall_at_k(&q, &g, &[5], &DEFAULT_K_VALUES)?
    );
    Ok(())
}
