use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MultimodalTable, ProblemType};
use crate::error::{Error, Result};

/// Removes rows whose label is null. Returns the filtered table and the
/// number of dropped rows.
pub fn drop_null_labels(table: &MultimodalTable, label: &str) -> Result<(MultimodalTable, usize)> {
    let col = table
        .column(label)
        .ok_or_else(|| Error::MissingLabelColumn(label.to_string()))?;
    let keep: Vec<usize> = (0..table.n_rows())
        .filter(|&i| !col.values[i].is_null())
        .collect();
    let dropped = table.n_rows() - keep.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with a null `{label}` label");
        Ok((table.select_rows(&keep), dropped))
    } else {
        Ok((table.clone(), 0))
    }
}

/// Row indices of a seeded train/validation partition, each sorted ascending.
///
/// Classification problems are stratified: each class contributes
/// `max(1, round(count * fraction))` rows to validation.
pub fn split_indices(
    table: &MultimodalTable,
    label: Option<&str>,
    holdout_fraction: f64,
    stratify: ProblemType,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 0.5) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction must lie in (0, 0.5), got {holdout_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = table.n_rows();

    let strata: Vec<Vec<usize>> = match (stratify.is_classification(), label) {
        (true, Some(label)) => {
            let col = table
                .column(label)
                .ok_or_else(|| Error::MissingLabelColumn(label.to_string()))?;
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, v) in col.values.iter().enumerate() {
                let key = v.key().ok_or_else(|| {
                    Error::InvalidTable(format!("null label at row {i}; drop null labels first"))
                })?;
                groups.entry(key).or_default().push(i);
            }
            groups.into_values().collect()
        }
        _ => vec![(0..n).collect()],
    };

    let mut train = Vec::with_capacity(n);
    let mut val = Vec::new();
    for mut rows in strata {
        let count = rows.len();
        let n_val = ((count as f64 * holdout_fraction).round() as usize).max(1);
        if n_val >= count {
            return Err(Error::TooFewRows(format!(
                "a stratum of {count} rows cannot supply {n_val} validation rows and keep one for training"
            )));
        }
        rows.shuffle(&mut rng);
        val.extend_from_slice(&rows[..n_val]);
        train.extend_from_slice(&rows[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Seeded, optionally stratified train/validation split.
pub fn split_train_val(
    table: &MultimodalTable,
    label: Option<&str>,
    holdout_fraction: f64,
    stratify: ProblemType,
    seed: u64,
) -> Result<(MultimodalTable, MultimodalTable)> {
    let (train, val) = split_indices(table, label, holdout_fraction, stratify, seed)?;
    Ok((table.select_rows(&train), table.select_rows(&val)))
}
