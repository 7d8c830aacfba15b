//! Column modality and problem type detection, without training.

use fuselite::synth;
use fuselite::table::{infer_problem_type, DetectionThresholds, TableSchema};

fn main() -> fuselite::Result<()> {
    let th = DetectionThresholds::default();
    let data = synth::toy_multimodal_table(60, 0);
    let problem = infer_problem_type(&data.column("outcome").unwrap().values, &th)?;
    let schema = TableSchema::infer(&data, Some("outcome"), problem, &th)?;
    println!("problem: {problem}");
    for c in &schema.columns {
        println!("{:>12}  {:?}", c.name, c.modality);
    }
    Ok(())
}
