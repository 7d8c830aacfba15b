use std::cell::RefCell;

use super::*;
use crate::error::Result;
use crate::models::params::Init;
use crate::models::{Graph, ParamGrads, ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Least squares `y = w x + b` on fixed points; validation can be scripted.
struct LineTask {
    params: ParamStore,
    xs: Vec<f64>,
    ys: Vec<f64>,
    script: Option<RefCell<Vec<f64>>>,
}

impl LineTask {
    fn new(n: usize) -> Self {
        let mut params = ParamStore::new(0);
        params.add(
            "body.w",
            &[1, 1],
            Init::Normal(0.5),
            2,
            ParamGroup::Backbone,
            true,
        );
        params.add("head.b", &[1], Init::Zeros, 0, ParamGroup::Head, false);
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 - 0.5).collect();
        let ys = xs.iter().map(|x| 2.0 * x + 0.3).collect();
        LineTask {
            params,
            xs,
            ys,
            script: None,
        }
    }
}

impl TrainingTask for LineTask {
    fn n_train(&self) -> usize {
        self.xs.len()
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss_and_grads(&self, rows: &[usize], _epoch: u64) -> Result<(f64, ParamGrads)> {
        let mut g = Graph::new(&self.params, true);
        let x = g.tape.constant(Tensor::new(
            vec![rows.len(), 1],
            rows.iter().map(|&r| self.xs[r]).collect(),
        ));
        let w = g.param(crate::models::ParamId(0));
        let b = g.param(crate::models::ParamId(1));
        let y = g.tape.matmul(x, w);
        let y = g.tape.add_bias(y, b);
        let t: Vec<f64> = rows.iter().map(|&r| self.ys[r]).collect();
        let l = g.tape.mse(y, &t);
        Ok((g.tape.value(l).item(), g.param_grads(l)))
    }

    fn validate(&self) -> Result<f64> {
        if let Some(s) = &self.script {
            let mut s = s.borrow_mut();
            return Ok(if s.len() > 1 { s.remove(0) } else { s[0] });
        }
        let (loss, _) = self.loss_and_grads(&(0..self.xs.len()).collect::<Vec<_>>(), 0)?;
        Ok(-loss)
    }
}

fn cfg(batch: usize, epochs: usize) -> PresetConfig {
    PresetConfig {
        batch_size: batch,
        max_epochs: epochs,
        learning_rate: 0.05,
        ..PresetConfig::default()
    }
}

fn fresh(task: &LineTask, c: &PresetConfig) -> TrainState {
    TrainState::new(
        task.params.len(),
        0,
        steps_per_epoch(task.n_train(), c.batch_size),
        c.max_epochs,
    )
}

fn run(task: &mut LineTask, c: &PresetConfig, opts: TrainOptions<'_>) -> Result<TrainState> {
    let state = fresh(task, c);
    train(task, c, state, opts)
}

#[test]
fn layerwise_rates_follow_depth() {
    let mut ps = ParamStore::new(0);
    for d in 0..3 {
        ps.add(
            format!("p{d}"),
            &[1],
            Init::Zeros,
            d,
            ParamGroup::Backbone,
            true,
        );
    }
    let c = PresetConfig::default();
    let rates = layerwise_lr_map(&ps, 1e-4, &c);
    let want = [1e-4, 9e-5, 8.1e-5];
    for (r, w) in rates.iter().zip(want) {
        assert!((r - w).abs() < 1e-18);
    }
    let uniform = PresetConfig {
        layerwise_lr_decay: 1.0,
        ..c.clone()
    };
    assert!(layerwise_lr_map(&ps, 1e-4, &uniform)
        .iter()
        .all(|&r| r == 1e-4));
    let single = PresetConfig {
        lr_choice: LrChoice::SingleStage,
        ..c.clone()
    };
    assert!(layerwise_lr_map(&ps, 1e-4, &single)
        .iter()
        .all(|&r| r == 1e-4));
    let two = PresetConfig {
        lr_choice: LrChoice::TwoStage,
        ..c
    };
    assert!(layerwise_lr_map(&ps, 1e-4, &two)
        .iter()
        .all(|&r| (r - 1e-5).abs() < 1e-20));
}

#[test]
fn twenty_checks_over_ten_epochs() {
    let mut task = LineTask::new(40);
    let c = cfg(10, 10);
    let s = run(&mut task, &c, TrainOptions::default()).unwrap();
    assert_eq!(s.history.len(), 40);
    assert_eq!(s.n_checks, 20);
    assert_eq!(
        s.history.iter().filter(|r| r.val_score.is_some()).count(),
        20
    );
    assert_eq!(s.status, TrainStatus::Completed);
    assert!(s.checkpoints.len() == 3);
}

#[test]
fn patience_counts_consecutive_checks() {
    let mut task = LineTask::new(40);
    task.script = Some(RefCell::new(vec![0.5, 0.6, 0.6, 0.6, 0.9]));
    let c = PresetConfig {
        patience: 2,
        ..cfg(10, 10)
    };
    let s = run(&mut task, &c, TrainOptions::default()).unwrap();
    assert_eq!(s.status, TrainStatus::EarlyStopped);
    assert_eq!(s.n_checks, 4);
    assert_eq!(s.history.last().unwrap().step, 8);
}

#[test]
fn training_is_deterministic_and_learns() {
    let run = || {
        let mut task = LineTask::new(32);
        let c = cfg(8, 20);
        let s = run(&mut task, &c, TrainOptions::default()).unwrap();
        (s.history, task.params.snapshot())
    };
    let (h1, w1) = run();
    let (h2, w2) = run();
    assert_eq!(h1, h2);
    assert_eq!(w1, w2);
    assert!(h1.last().unwrap().train_loss < h1[0].train_loss);
}

#[test]
fn interrupt_and_resume_matches_uninterrupted_run() {
    let c = PresetConfig {
        tricks: TrickToggles {
            greedy_soup: true,
            ..TrickToggles::ALL
        },
        ..cfg(4, 10)
    };
    let mut full = LineTask::new(40);
    let s_full = run(&mut full, &c, TrainOptions::default()).unwrap();
    assert_eq!(s_full.history.len(), 100);

    let mut part = LineTask::new(40);
    let opts = TrainOptions {
        interrupt_after: Some(50),
        ..TrainOptions::default()
    };
    let s_half = run(&mut part, &c, opts).unwrap();
    assert_eq!(s_half.status, TrainStatus::Interrupted);
    assert_eq!(s_half.history.len(), 50);
    let s_rest = train(&mut part, &c, s_half, TrainOptions::default()).unwrap();
    let steps: Vec<u64> = s_rest.history.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=100).collect::<Vec<_>>());
    assert_eq!(s_rest.history, s_full.history);
    assert_eq!(part.params.snapshot(), full.params.snapshot());
}

#[test]
fn toggles_change_only_documented_quantities() {
    let mut task = LineTask::new(40);
    let c = PresetConfig {
        tricks: TrickToggles::NONE,
        gradient_clip_val: 0.01,
        ..cfg(10, 4)
    };
    let s = run(&mut task, &c, TrainOptions::default()).unwrap();
    let warm = (c.warmup_steps * 16.0) as u64;
    for r in &s.history {
        assert_eq!(r.grad_norm, r.clipped_norm);
        assert_eq!(r.weight_decay, 0.0);
        assert_eq!(r.lr_min, r.lr_max);
        if r.step > warm {
            assert_eq!(r.lr, c.learning_rate);
        }
    }
    assert_eq!(s.soup_members, vec![s.checkpoints[0].step]);
    assert_eq!(task.params.snapshot(), s.checkpoints[0].weights);

    let mut task = LineTask::new(40);
    let on = PresetConfig {
        tricks: TrickToggles::ALL,
        ..c
    };
    let s = run(&mut task, &on, TrainOptions::default()).unwrap();
    assert!(s.history.iter().all(|r| r.clipped_norm <= 0.01 + 1e-12));
    assert!(s.history.iter().all(|r| r.weight_decay == on.weight_decay));
    assert!(s.history.iter().any(|r| r.lr_min < r.lr_max));
    assert!(s.history.last().unwrap().lr < 1e-12);
}

#[test]
fn non_finite_loss_reports_step() {
    let mut task = LineTask::new(8);
    task.ys[3] = f64::NAN;
    let c = cfg(8, 2);
    let err = run(&mut task, &c, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, crate::Error::NonFiniteLoss(1)));
}

#[test]
fn validation_step_positions() {
    assert_eq!(validation_steps(10, 0.5), vec![5, 10]);
    assert_eq!(validation_steps(1, 0.5), vec![1]);
    assert_eq!(validation_steps(10, 0.3), vec![3, 6, 9, 10]);
    assert_eq!(validation_steps(7, 1.0), vec![7]);
}
