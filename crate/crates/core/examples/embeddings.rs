//! Fused pre-head embeddings, one row per input row.

use fuselite::predictor::{FitOptions, Predictor};
use fuselite::synth;

fn main() -> fuselite::Result<()> {
    let data = synth::toy_multimodal_table(60, 1);
    let opts = FitOptions::default()
        .with_override("backbone_dim", 16)
        .with_override("fusion_dim", 32)
        .with_override("batch_size", 16)
        .with_override("max_epochs", 2);
    let mut p = Predictor::new("outcome");
    p.fit(&data, &opts)?;
    let emb = p.extract_embedding(&data)?;
    println!("shape {:?}", emb.shape());
    println!("row 0 {:.3?}", &emb.row(0)[..8]);
    Ok(())
}
