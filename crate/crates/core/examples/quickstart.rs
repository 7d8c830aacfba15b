//! Fit, predict and evaluate on the bundled toy table.
//!
//!     cargo run --release --example quickstart

use fuselite::predictor::{FitOptions, Predictor};
use fuselite::table::{read_csv, CsvOptions};
use fuselite::trainer::Quality;

fn main() -> fuselite::Result<()> {
    env_logger::init();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/toy_multimodal.csv");
    let data = read_csv(path, &CsvOptions::default())?;

    let opts = FitOptions {
        preset: Some(Quality::MediumQuality),
        ..FitOptions::default()
    }
    .with_override("batch_size", 32)
    .with_override("learning_rate", 1e-3);

    let mut predictor = Predictor::new("outcome");
    predictor.fit(&data, &opts)?;
    println!("problem type: {:?}", predictor.problem_type());

    let head = data.select_rows(&[0, 1, 2, 3, 4]);
    for (row, pred) in predictor.predict(&head)?.iter().enumerate() {
        println!("row {row}: {pred}");
    }
    println!("{:?}", predictor.evaluate(&data)?);
    Ok(())
}
