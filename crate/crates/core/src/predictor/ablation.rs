//! Five-trick ablation: the baseline, each trick alone, and all tricks,
//! trained on the same data, with per-run checks of what each toggle is
//! supposed to change.

use std::fmt::Write as _;

use serde_json::json;

use super::{FitOptions, Predictor};
use crate::error::{Error, Result};
use crate::metrics::MetricName;
use crate::table::{drop_null_labels, MultimodalTable};
use crate::tensor::Tensor;
use crate::trainer::{
    average_weights, lr_at, steps_per_epoch, HistoryRecord, PresetConfig, TrickToggles,
};

/// One report column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationColumn {
    pub name: &'static str,
    pub tricks: TrickToggles,
}

impl AblationColumn {
    /// `base`, `+ <trick>` for each trick, then `+ all`.
    pub fn all() -> Vec<AblationColumn> {
        let mut cols = vec![AblationColumn {
            name: "base",
            tricks: TrickToggles::NONE,
        }];
        for name in TrickToggles::NAMES {
            cols.push(AblationColumn {
                name,
                tricks: TrickToggles::only(name).expect("listed trick"),
            });
        }
        cols.push(AblationColumn {
            name: "all",
            tricks: TrickToggles::ALL,
        });
        cols
    }

    pub fn header(&self) -> String {
        match self.name {
            "base" => "base".to_string(),
            n => format!("+ {n}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub column: AblationColumn,
    pub seed: u64,
    pub preset: PresetConfig,
    pub score: f64,
    pub total_steps: u64,
    /// Deepest trainable parameter.
    pub max_depth: usize,
    pub history: Vec<HistoryRecord>,
    pub soup_members: Vec<u64>,
    /// Step of the best checkpoint.
    pub best_step: u64,
    /// Final weights equal the uniform average of the member checkpoints.
    pub weights_from_members: bool,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub task: String,
    pub metric: MetricName,
    pub runs: Vec<AblationRun>,
}

/// Trains one predictor per (column, seed) on `train`, scoring each on
/// `eval` with the problem's default metric. `eval` is also the tuning set.
pub fn run_ablation(
    task: &str,
    train: &MultimodalTable,
    eval: &MultimodalTable,
    label: &str,
    options: &FitOptions,
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs at least one seed".into(),
        ));
    }
    let n_train = drop_null_labels(train, label)?.0.n_rows();
    let mut runs = Vec::new();
    let mut metric = None;
    for column in AblationColumn::all() {
        for &seed in seeds {
            let mut opts = FitOptions {
                seed,
                tuning_data: Some(eval.clone()),
                hpo: None,
                save_path: None,
                interrupt_after: None,
                ..options.clone()
            };
            opts.overrides.insert("tricks".into(), json!(column.tricks));
            let mut p = Predictor::new(label);
            p.fit(train, &opts)?;
            let m = p.metric().ok_or(Error::NotTrained)?;
            let score = p.evaluate(eval)?[m.as_str()];
            metric = Some(m);
            let preset = p.preset().ok_or(Error::NotTrained)?.clone();
            let params = p.params().ok_or(Error::NotTrained)?;
            let max_depth = params
                .iter()
                .filter(|q| q.trainable)
                .map(|q| q.depth)
                .max()
                .unwrap_or(0);
            let members: Vec<&[Tensor]> = p
                .soup_members()
                .iter()
                .filter_map(|s| p.checkpoints().iter().find(|c| c.step == *s))
                .map(|c| c.weights.as_slice())
                .collect();
            let weights_from_members = members.len() == p.soup_members().len()
                && average_weights(&members) == params.snapshot();
            log::info!(
                "ablation {task} {} seed {seed}: {score:.4}",
                column.header()
            );
            runs.push(AblationRun {
                column,
                seed,
                total_steps: steps_per_epoch(n_train, preset.batch_size) * preset.max_epochs as u64,
                preset,
                score,
                max_depth,
                history: p.history().to_vec(),
                soup_members: p.soup_members().to_vec(),
                best_step: p.checkpoints().first().map_or(0, |c| c.step),
                weights_from_members,
            });
        }
    }
    Ok(AblationReport {
        task: task.to_string(),
        metric: metric.expect("at least one run"),
        runs,
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
}

/// Violations of the documented per-step effects of the run's toggles;
/// empty when the run behaves as specified.
pub fn check_mechanics(run: &AblationRun) -> Vec<String> {
    let t = run.column.tricks;
    let cfg = &run.preset;
    let mut bad = Vec::new();
    let warmup_end = (cfg.warmup_steps * run.total_steps as f64).ceil() as u64;
    let mut prev_lr = f64::INFINITY;
    for r in &run.history {
        let expect = lr_at(r.step, run.total_steps, cfg);
        if r.lr != expect {
            bad.push(format!(
                "step {}: lr {} but schedule gives {expect}",
                r.step, r.lr
            ));
        }
        if r.step > warmup_end {
            if !t.cosine_decay && r.lr != cfg.learning_rate {
                bad.push(format!("step {}: lr {} not held at peak", r.step, r.lr));
            }
            if t.cosine_decay && r.step > warmup_end + 1 && r.lr > prev_lr {
                bad.push(format!("step {}: lr rose under cosine decay", r.step));
            }
        }
        prev_lr = r.lr;

        if t.grad_clip {
            let target = r.grad_norm.min(cfg.gradient_clip_val);
            if (r.clipped_norm - target).abs() > 1e-9 * target.max(1.0) {
                bad.push(format!(
                    "step {}: clipped norm {} expected {target}",
                    r.step, r.clipped_norm
                ));
            }
        } else if r.clipped_norm != r.grad_norm {
            bad.push(format!(
                "step {}: gradient changed without clipping",
                r.step
            ));
        }

        let wd = if t.weight_decay {
            cfg.weight_decay
        } else {
            0.0
        };
        if r.weight_decay != wd {
            bad.push(format!(
                "step {}: weight decay {} expected {wd}",
                r.step, r.weight_decay
            ));
        }

        if t.layerwise_lr_decay {
            let deepest = r.lr * cfg.layerwise_lr_decay.powi(run.max_depth as i32);
            if r.lr_max != r.lr || !close(r.lr_min, deepest) {
                bad.push(format!(
                    "step {}: layer rates [{}, {}] expected [{deepest}, {}]",
                    r.step, r.lr_min, r.lr_max, r.lr
                ));
            }
        } else if r.lr_min != r.lr || r.lr_max != r.lr {
            bad.push(format!("step {}: layer rates not uniform", r.step));
        }
    }

    if !run.weights_from_members {
        bad.push("final weights are not the average of the recorded members".into());
    }
    if run.soup_members.first() != Some(&run.best_step) {
        bad.push(format!(
            "first member {:?} is not the best checkpoint {}",
            run.soup_members.first(),
            run.best_step
        ));
    }
    if !t.greedy_soup && run.soup_members.len() != 1 {
        bad.push(format!(
            "{} members without greedy soup",
            run.soup_members.len()
        ));
    }
    bad
}

impl AblationReport {
    pub fn columns(&self) -> Vec<AblationColumn> {
        AblationColumn::all()
    }

    /// Mean score and 1.96·std/√n error bar for one column.
    pub fn summary(&self, column: &str) -> Option<(f64, f64)> {
        let scores: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.column.name == column)
            .map(|r| r.score)
            .collect();
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let err = if scores.len() > 1 {
            let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        Some((mean, err))
    }

    /// One markdown row per task, one column per configuration.
    pub fn to_markdown(&self) -> String {
        let cols = self.columns();
        let mut s = String::from("| Task |");
        for c in &cols {
            let _ = write!(s, " {} |", c.header());
        }
        s.push_str("\n|---|");
        for _ in &cols {
            s.push_str("---|");
        }
        let _ = write!(s, "\n| {} ({}) |", self.task, self.metric);
        for c in &cols {
            match self.summary(c.name) {
                Some((m, e)) => {
                    let _ = write!(s, " {m:.4} ± {e:.4} |");
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
        s
    }
}
