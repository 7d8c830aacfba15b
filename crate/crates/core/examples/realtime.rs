//! Single-row inference through the realtime path versus the batch path.

use std::time::Instant;

use fuselite::predictor::{FitOptions, Predictor};
use fuselite::synth;

fn main() -> fuselite::Result<()> {
    let data = synth::overfit_table(32, 0);
    let mut p = Predictor::new("label");
    p.fit(&data, &FitOptions::default().with_override("max_epochs", 1))?;

    let row = data.select_rows(&[3]);
    let t = Instant::now();
    let fast = p.predict_realtime(&row)?;
    let rt = t.elapsed();
    let t = Instant::now();
    let slow = p.predict(&row)?;
    let batch = t.elapsed();
    assert_eq!(fast, slow);
    println!("{} realtime {rt:?} batch {batch:?}", fast[0]);
    Ok(())
}
