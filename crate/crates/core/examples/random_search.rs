//! Uniform random search over preset overrides; the best trial is returned.

use std::collections::BTreeMap;

use fuselite::predictor::{random_search, FitOptions, RandomSearchSpec};
use fuselite::synth;
use serde_json::json;

fn main() -> fuselite::Result<()> {
    let data = synth::text_table(64, 0);
    let spec = RandomSearchSpec {
        trials: 4,
        space: BTreeMap::from([
            ("learning_rate".into(), vec![json!(1e-4), json!(1e-3)]),
            ("weight_decay".into(), vec![json!(0.0), json!(1e-2)]),
        ]),
    };
    let opts = FitOptions::default()
        .with_override("backbone_dim", 16)
        .with_override("batch_size", 16)
        .with_override("max_epochs", 2);
    let (best, trials) = random_search(&data, "sentiment", &spec, &opts, 0)?;
    for t in &trials {
        println!(
            "trial {} {} -> {:.4}",
            t.trial,
            serde_json::to_string(&t.overrides)?,
            t.val_score
        );
    }
    println!("kept lr {}", best.preset().unwrap().learning_rate);
    Ok(())
}
