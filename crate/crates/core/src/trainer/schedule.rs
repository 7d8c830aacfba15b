use std::f64::consts::PI;

use super::config::{LrChoice, LrSchedule, PresetConfig};
use crate::models::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

const MULTI_STEP_GAMMA: f64 = 0.1;
const POLY_POWER: f64 = 0.9;

/// Peak-scaled learning rate for update `step` of `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &PresetConfig) -> f64 {
    let peak = cfg.learning_rate;
    if total_steps == 0 {
        return peak;
    }
    let (s, total) = (step.min(total_steps) as f64, total_steps as f64);
    let warm = cfg.warmup_steps * total;
    if s < warm {
        return peak * s / warm;
    }
    let span = total - warm;
    let progress = if span > 0.0 { (s - warm) / span } else { 1.0 };
    match cfg.lr_schedule {
        LrSchedule::CosineDecay if cfg.tricks.cosine_decay => {
            peak * 0.5 * (1.0 + (PI * progress).cos())
        }
        LrSchedule::CosineDecay | LrSchedule::None => peak,
        LrSchedule::MultiStep => {
            let passed = cfg
                .lr_steps
                .iter()
                .filter(|&&m| s >= m / cfg.max_epochs as f64 * total)
                .count();
            peak * MULTI_STEP_GAMMA.powi(passed as i32)
        }
        LrSchedule::PolynomialDecay => peak * (1.0 - progress).max(0.0).powf(POLY_POWER),
    }
}

/// Per-parameter multiplier on the scheduled rate.
pub fn lr_multipliers(params: &ParamStore, cfg: &PresetConfig) -> Vec<f64> {
    params
        .iter()
        .map(|p| match cfg.lr_choice {
            LrChoice::LayerwiseDecay if cfg.tricks.layerwise_lr_decay => {
                cfg.layerwise_lr_decay.powi(p.depth as i32)
            }
            LrChoice::TwoStage if p.group == ParamGroup::Backbone => cfg.lr_multiplier,
            _ => 1.0,
        })
        .collect()
}

/// Absolute learning rate of every parameter for base rate `base_lr`.
pub fn layerwise_lr_map(params: &ParamStore, base_lr: f64, cfg: &PresetConfig) -> Vec<f64> {
    lr_multipliers(params, cfg)
        .into_iter()
        .map(|m| base_lr * m)
        .collect()
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
