//! Write an artifact while training, stop half way, then pick the run back up
//! from disk.

use fuselite::predictor::{FitOptions, Predictor};
use fuselite::synth;

fn main() -> fuselite::Result<()> {
    let data = synth::text_table(80, 0);
    let dir = std::env::temp_dir().join("fuselite-resume-example");
    let opts = FitOptions::default()
        .with_override("backbone_dim", 16)
        .with_override("batch_size", 16)
        .with_override("max_epochs", 6)
        .with_override("patience", 100);

    let killed = FitOptions {
        save_path: Some(dir.clone()),
        interrupt_after: Some(10),
        ..opts.clone()
    };
    let mut p = Predictor::new("sentiment");
    p.fit(&data, &killed)?;
    println!(
        "stopped: {:?} after {} steps",
        p.status(),
        p.history().len()
    );

    let mut p = Predictor::load(&dir, true)?;
    p.fit(&data, &opts)?;
    println!(
        "resumed: {:?} after {} steps",
        p.status(),
        p.history().len()
    );

    p.save(&dir)?;
    let again = Predictor::load(&dir, false)?;
    assert_eq!(again.predict(&data)?, p.predict(&data)?);
    println!("artifact at {}", dir.display());
    Ok(())
}
