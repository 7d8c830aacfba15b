//! A second `fit` keeps the weights and continues step numbering.

use fuselite::predictor::{FitOptions, Predictor};
use fuselite::synth;

fn main() -> fuselite::Result<()> {
    let first = synth::text_table(64, 0);
    let more = synth::text_table(64, 1);
    let opts = FitOptions::default()
        .with_override("backbone_dim", 16)
        .with_override("batch_size", 16)
        .with_override("max_epochs", 2);

    let mut p = Predictor::new("sentiment");
    p.fit(&first, &opts)?;
    println!("after first fit: step {}", p.history().last().unwrap().step);
    // Architecture keys are locked now; rates and budgets are not.
    p.fit(&more, &opts.clone().with_override("learning_rate", 5e-5))?;
    println!(
        "after second fit: step {}",
        p.history().last().unwrap().step
    );
    println!("{:?}", p.evaluate(&more)?);
    Ok(())
}
