use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PresetConfig;
use super::optim::AdamW;
use super::schedule::{clip_gradients, global_norm, lr_at, lr_multipliers};
use super::soup::{greedy_soup, keep_top_k, CheckpointRecord, IMPROVEMENT_TOL};
use crate::error::{Error, Result};
use crate::models::{ParamGrads, ParamStore};

/// A model plus data the training loop can drive.
pub trait TrainingTask {
    fn n_train(&self) -> usize;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Mean loss and gradients on the given training rows.
    fn loss_and_grads(&self, rows: &[usize], epoch: u64) -> Result<(f64, ParamGrads)>;
    /// Validation score of the current weights, higher is better.
    fn validate(&self) -> Result<f64>;
}

/// One optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Global step, continuing across fits.
    pub step: u64,
    pub epoch: u64,
    /// Scheduled (peak-scaled) rate before layerwise multipliers.
    pub lr: f64,
    /// Smallest and largest per-parameter rate among trainable parameters.
    pub lr_min: f64,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub train_loss: f64,
    /// Gradient norm before and after clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Running,
    Completed,
    EarlyStopped,
    TimeLimit,
    Interrupted,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step_offset: u64,
    /// Updates completed in this run.
    pub run_step: u64,
    pub total_steps: u64,
    pub steps_per_epoch: u64,
    pub optimizer: AdamW,
    pub best_score: Option<f64>,
    pub bad_checks: usize,
    pub n_checks: usize,
    pub checkpoints: Vec<CheckpointRecord>,
    pub history: Vec<HistoryRecord>,
    pub status: TrainStatus,
    pub soup_members: Vec<u64>,
}

impl TrainState {
    pub fn new(n_params: usize, step_offset: u64, steps_per_epoch: u64, max_epochs: usize) -> Self {
        TrainState {
            step_offset,
            run_step: 0,
            total_steps: steps_per_epoch * max_epochs as u64,
            steps_per_epoch,
            optimizer: AdamW::new(n_params),
            best_score: None,
            bad_checks: 0,
            n_checks: 0,
            checkpoints: Vec::new(),
            history: Vec::new(),
            status: TrainStatus::Running,
            soup_members: Vec::new(),
        }
    }

    pub fn global_step(&self) -> u64 {
        self.step_offset + self.run_step
    }

    pub fn is_finished(&self) -> bool {
        !matches!(self.status, TrainStatus::Running | TrainStatus::Interrupted)
    }
}

/// Called at every validation boundary with the state and current weights.
pub type BoundaryHook<'a> = dyn FnMut(&TrainState, &ParamStore) -> Result<()> + 'a;

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub time_limit: Option<Duration>,
    /// Stop right after this many updates of the run, as if killed.
    pub interrupt_after: Option<u64>,
    pub on_boundary: Option<&'a mut BoundaryHook<'a>>,
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> u64 {
    n_train.div_ceil(batch_size) as u64
}

/// In-epoch steps (1-based) after which validation runs.
pub fn validation_steps(steps_per_epoch: u64, interval: f64) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    let mut k = 1;
    loop {
        let frac = (k as f64 * interval).min(1.0);
        let s = ((frac * steps_per_epoch as f64) - 1e-9).ceil().max(1.0) as u64;
        if out.last() != Some(&s) {
            out.push(s);
        }
        if frac >= 1.0 {
            break;
        }
        k += 1;
    }
    out
}

/// Row order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch);
    order.shuffle(&mut rng);
    order
}

/// Runs (or continues) a training run. On completion the task holds the
/// soup or the best checkpoint, per the greedy-soup toggle.
pub fn train<T: TrainingTask>(
    task: &mut T,
    cfg: &PresetConfig,
    mut state: TrainState,
    opts: TrainOptions<'_>,
) -> Result<TrainState> {
    let n = task.n_train();
    if n == 0 {
        return Err(Error::EmptyTrainSet);
    }
    let started = Instant::now();
    let TrainOptions {
        time_limit,
        interrupt_after,
        mut on_boundary,
    } = opts;
    state.status = TrainStatus::Running;
    let spe = state.steps_per_epoch;
    let checks = validation_steps(spe, cfg.val_check_interval);
    let weight_decay = if cfg.tricks.weight_decay {
        cfg.weight_decay
    } else {
        0.0
    };

    'outer: while state.run_step < state.total_steps {
        let epoch = state.run_step / spe;
        let order = epoch_order(n, cfg.seed, epoch);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let first = (state.run_step % spe) as usize;
        for (b_idx, rows) in batches.iter().enumerate().skip(first) {
            if let Some(limit) = time_limit {
                if state.n_checks == 0 && started.elapsed() >= limit {
                    return Err(Error::TimeLimitTooSmall);
                }
            }
            let step = state.run_step + 1;
            let global = state.step_offset + step;
            let (loss, mut grads) = task.loss_and_grads(rows, epoch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(global));
            }
            for (g, p) in grads.iter_mut().zip(task.params().iter()) {
                if !p.trainable {
                    *g = None;
                }
            }
            let grad_norm = if cfg.tricks.grad_clip {
                clip_gradients(&mut grads, cfg.gradient_clip_val)
            } else {
                global_norm(&grads)
            };
            let clipped_norm = global_norm(&grads);
            let lr = lr_at(step, state.total_steps, cfg);
            let mults = lr_multipliers(task.params(), cfg);
            let lrs: Vec<f64> = mults.iter().map(|m| lr * m).collect();
            let (lr_min, lr_max) = task
                .params()
                .iter()
                .zip(&lrs)
                .filter(|(p, _)| p.trainable)
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), (_, &r)| {
                    (lo.min(r), hi.max(r))
                });
            state
                .optimizer
                .step(task.params_mut(), &grads, &lrs, weight_decay);
            state.run_step = step;
            let mut rec = HistoryRecord {
                step: global,
                epoch,
                lr,
                lr_min,
                lr_max,
                weight_decay,
                train_loss: loss,
                grad_norm,
                clipped_norm,
                val_score: None,
            };

            let in_epoch = b_idx as u64 + 1;
            let mut stop = None;
            if checks.contains(&in_epoch) {
                let score = task.validate()?;
                rec.val_score = Some(score);
                state.n_checks += 1;
                keep_top_k(
                    &mut state.checkpoints,
                    CheckpointRecord {
                        step: global,
                        val_score: score,
                        weights: task.params().snapshot(),
                    },
                    cfg.top_k,
                );
                match state.best_score {
                    Some(best) if score <= best + IMPROVEMENT_TOL => state.bad_checks += 1,
                    _ => {
                        state.best_score = Some(score);
                        state.bad_checks = 0;
                    }
                }
                if state.bad_checks >= cfg.patience {
                    stop = Some(TrainStatus::EarlyStopped);
                } else if time_limit.is_some_and(|l| started.elapsed() >= l) {
                    stop = Some(TrainStatus::TimeLimit);
                }
                state.history.push(rec);
                if let Some(hook) = on_boundary.as_deref_mut() {
                    hook(&state, task.params())?;
                }
            } else {
                state.history.push(rec);
            }
            if let Some(s) = stop {
                state.status = s;
                break 'outer;
            }
            if interrupt_after.is_some_and(|k| state.run_step >= k) {
                state.status = TrainStatus::Interrupted;
                return Ok(state);
            }
        }
    }
    if state.status == TrainStatus::Running {
        state.status = TrainStatus::Completed;
    }
    finalize(task, cfg, &mut state)?;
    Ok(state)
}

/// Installs the final weights: the greedy soup, or the best checkpoint.
fn finalize<T: TrainingTask>(
    task: &mut T,
    cfg: &PresetConfig,
    state: &mut TrainState,
) -> Result<()> {
    if state.checkpoints.is_empty() {
        return Err(Error::NoCheckpoints);
    }
    if cfg.tricks.greedy_soup {
        let original = task.params().snapshot();
        let result = greedy_soup(&state.checkpoints, |w| {
            task.params_mut().restore(w);
            task.validate()
        });
        task.params_mut().restore(&original);
        let result = result?;
        task.params_mut().restore(&result.weights);
        state.soup_members = result.members;
    } else {
        let best = &state.checkpoints[0];
        task.params_mut().restore(&best.weights);
        state.soup_members = vec![best.step];
    }
    Ok(())
}

pub fn write_history(history: &[HistoryRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
