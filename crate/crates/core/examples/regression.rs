//! Numeric target: the problem type is inferred as regression and scored by r2.

use fuselite::predictor::{FitOptions, Predictor};
use fuselite::synth;

fn main() -> fuselite::Result<()> {
    let data = synth::regression_table(200, 0);
    let opts = FitOptions::default()
        .with_override("backbone_dim", 32)
        .with_override("batch_size", 32)
        .with_override("learning_rate", 1e-3)
        .with_override("max_epochs", 20);
    let mut p = Predictor::new("y");
    p.fit(&data, &opts)?;
    println!("{:?} -> {:?}", p.problem_type(), p.evaluate(&data)?);
    Ok(())
}
