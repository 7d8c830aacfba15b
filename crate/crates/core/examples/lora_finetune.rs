//! Parameter-efficient training: adapters on the attention query and value
//! maps, everything else in the backbone frozen.

use fuselite::models::LoraConfig;
use fuselite::predictor::{FitOptions, Predictor};
use fuselite::synth;
use fuselite::trainer::Quality;

fn main() -> fuselite::Result<()> {
    let data = synth::text_table(64, 0);
    let opts = FitOptions {
        preset: Some(Quality::BestQuality),
        ..FitOptions::default()
    }
    .with_override("lora", serde_json::to_value(LoraConfig::default())?)
    .with_override("batch_size", 16)
    .with_override("learning_rate", 1e-3)
    .with_override("max_epochs", 3);
    let mut p = Predictor::new("sentiment");
    p.fit(&data, &opts)?;
    let params = p.params().unwrap();
    println!(
        "trainable {} of {} ({:.1}%)",
        params.n_trainable(),
        params.n_elements(),
        100.0 * params.n_trainable() as f64 / params.n_elements() as f64
    );
    println!("{:?}", p.evaluate(&data)?);
    Ok(())
}
