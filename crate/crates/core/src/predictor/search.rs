//! Uniform random search over preset overrides.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{FitOptions, Predictor};
use crate::error::{Error, Result};
use crate::table::{
    drop_null_labels, infer_problem_type, split_train_val, DetectionThresholds, MultimodalTable,
};
use crate::trainer::{PresetConfig, TrainStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSearchSpec {
    pub trials: usize,
    /// Candidate values per override key.
    pub space: BTreeMap<String, Vec<Value>>,
}

impl Default for RandomSearchSpec {
    fn default() -> Self {
        let space = BTreeMap::from([
            (
                "learning_rate".to_string(),
                vec![json!(1e-4), json!(3e-4), json!(1e-3)],
            ),
            (
                "batch_size".to_string(),
                vec![json!(16), json!(32), json!(64), json!(128)],
            ),
            (
                "weight_decay".to_string(),
                vec![json!(0.0), json!(1e-3), json!(1e-2)],
            ),
            (
                "backbone_dim".to_string(),
                vec![json!(32), json!(64), json!(128)],
            ),
        ]);
        RandomSearchSpec { trials: 4, space }
    }
}

impl RandomSearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig(
                "random search needs at least one trial".into(),
            ));
        }
        let probe = PresetConfig::default();
        for (key, values) in &self.space {
            let first = values.first().ok_or_else(|| {
                Error::InvalidConfig(format!("search space for `{key}` is empty"))
            })?;
            probe.with_overrides([(key.as_str(), first)])?;
        }
        Ok(())
    }

    /// The sampled override sets, one per trial.
    pub fn sample(&self, seed: u64) -> Vec<BTreeMap<String, Value>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.trials)
            .map(|_| {
                self.space
                    .iter()
                    .map(|(k, vals)| (k.clone(), vals[rng.random_range(0..vals.len())].clone()))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub overrides: BTreeMap<String, Value>,
    /// Validation score of the trial's final weights.
    pub val_score: f64,
    pub status: TrainStatus,
    pub steps: u64,
}

/// Fits one predictor per sampled configuration on a shared train/val
/// split and returns the best by validation score with the trial log.
/// Ties keep the earlier trial.
pub fn random_search(
    data: &MultimodalTable,
    label: &str,
    spec: &RandomSearchSpec,
    options: &FitOptions,
    seed: u64,
) -> Result<(Predictor, Vec<TrialRecord>)> {
    spec.validate()?;
    let (data, _) = drop_null_labels(data, label)?;
    let (train, val) = match &options.tuning_data {
        Some(v) => (data.clone(), v.clone()),
        None => {
            let labels = &data
                .column(label)
                .ok_or_else(|| Error::MissingLabelColumn(label.to_string()))?
                .values;
            let problem = infer_problem_type(labels, &DetectionThresholds::default())?;
            split_train_val(&data, Some(label), options.holdout(), problem, options.seed)?
        }
    };
    let mut best: Option<(f64, Predictor)> = None;
    let mut log = Vec::with_capacity(spec.trials);
    for (trial, sampled) in spec.sample(seed).into_iter().enumerate() {
        let mut overrides = options.overrides.clone();
        overrides.extend(sampled.clone());
        let trial_opts = FitOptions {
            overrides,
            tuning_data: Some(val.clone()),
            hpo: None,
            save_path: None,
            ..options.clone()
        };
        let mut p = Predictor::new(label);
        p.fit(&train, &trial_opts)?;
        let report = p.evaluate(&val)?;
        let score = p
            .metric()
            .and_then(|m| report.get(m.as_str()).copied())
            .unwrap_or(f64::NEG_INFINITY);
        log::info!("trial {trial}: {sampled:?} -> {score:.4}");
        log.push(TrialRecord {
            trial,
            overrides: sampled,
            val_score: score,
            status: p.status().unwrap_or(TrainStatus::Completed),
            steps: p.history().last().map_or(0, |r| r.step),
        });
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, p));
        }
    }
    let (_, p) = best.expect("at least one trial");
    if let Some(dir) = &options.save_path {
        p.save(dir)?;
    }
    Ok((p, log))
}
