//! Positive-only image-caption pairs trained with in-batch negatives, then
//! scored by Recall@K in both directions.

use fuselite::predictor::{EvalOptions, FitOptions, MatchingSpec, Predictor, RetrievalDirection};
use fuselite::synth;
use fuselite::table::ProblemType;

fn main() -> fuselite::Result<()> {
    let pairs = synth::itm_pairs(64, 5);
    let spec = MatchingSpec {
        problem_type: ProblemType::Itm,
        query_column: "image".into(),
        response_column: "caption".into(),
        label: None,
    };
    let opts = FitOptions {
        tuning_data: Some(pairs.clone()),
        ..FitOptions::default()
    }
    .with_override("batch_size", 32)
    .with_override("learning_rate", 1e-3)
    .with_override("max_epochs", 40);
    let p = Predictor::fit_matching(&pairs, spec, &opts)?;

    println!("image -> text {:?}", p.evaluate(&pairs)?);
    let reverse = EvalOptions {
        direction: RetrievalDirection::ResponseToQuery,
        ..EvalOptions::default()
    };
    println!("text -> image {:?}", p.evaluate_with(&pairs, &reverse)?);
    Ok(())
}
