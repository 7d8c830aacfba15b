//! Baseline, each of the five training tricks alone, and all of them, on the
//! overfit fixture. Prints the per-run mechanics check and the report table.

use fuselite::predictor::{check_mechanics, run_ablation, FitOptions};
use fuselite::synth;

fn main() -> fuselite::Result<()> {
    let data = synth::overfit_table(32, 7);
    let opts = FitOptions::default()
        .with_override("backbone_dim", 32)
        .with_override("max_epochs", 40)
        .with_override("patience", 100);
    let report = run_ablation("overfit-32", &data, &data, "label", &opts, &[0, 1])?;
    for run in &report.runs {
        let bad = check_mechanics(run);
        println!(
            "{:<22} seed {}: {}",
            run.column.header(),
            run.seed,
            if bad.is_empty() { "ok" } else { "VIOLATION" }
        );
    }
    print!("\n{}", report.to_markdown());
    Ok(())
}
