//! Labeled image-image matching with a shared tower and contrastive loss.

use fuselite::predictor::{FitOptions, MatchingSpec, Predictor};
use fuselite::synth;
use fuselite::table::ProblemType;

fn main() -> fuselite::Result<()> {
    let train = synth::iim_pairs(120, 4, 0);
    let test = synth::iim_pairs(40, 4, 1);
    let spec = MatchingSpec {
        problem_type: ProblemType::Iim,
        query_column: "left".into(),
        response_column: "right".into(),
        label: Some("match".into()),
    };
    let opts = FitOptions::default()
        .with_override("batch_size", 32)
        .with_override("max_epochs", 5);
    let p = Predictor::fit_matching(&train, spec, &opts)?;
    println!("{:?}", p.evaluate(&test)?);
    let proba = p.predict_proba(&test.select_rows(&[0, 1]))?;
    println!(
        "p(match) for a positive and a negative pair: {:.3} {:.3}",
        proba[0][1], proba[1][1]
    );
    Ok(())
}
