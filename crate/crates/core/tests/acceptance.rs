//! Acceptance criteria. Runs sequentially in one test so timings are not
//! disturbed by other criteria; prints one PASS/FAIL line per criterion.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fuselite::metrics;
use fuselite::models::{
    build_fusion_model, inject_lora, Graph, LoraConfig, ParamGroup, ParamStore,
};
use fuselite::pipeline::{collate, fit_pipeline, sample_rng, Batch, PipelineState};
use fuselite::predictor::{
    check_mechanics, run_ablation, EvalOptions, FitOptions, MatchingSpec, Predictor,
    RetrievalDirection,
};
use fuselite::synth;
use fuselite::table::{Cell, DetectionThresholds, MultimodalTable, ProblemType, TableSchema};
use fuselite::tensor::Tensor;
use fuselite::trainer::{
    greedy_soup, CheckpointRecord, LrChoice, LrSchedule, PoolingMode, PresetConfig, Quality,
    TrickToggles,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn criterion(n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let took = start.elapsed();
    let result = match result {
        Ok(d) if took > budget => Err(format!("{d}; took {took:.1?}, budget {budget:?}")),
        r => r,
    };
    let ok = result.is_ok();
    let detail = result.unwrap_or_else(|e| e);
    report(&format!(
        "criterion {n:>2} {name}: {} ({detail}; {took:.1?})",
        if ok { "PASS" } else { "FAIL" }
    ));
    ok
}

#[test]
fn acceptance() {
    let results = [
        criterion(
            1,
            "preset fidelity",
            Duration::from_secs(1),
            preset_fidelity,
        ),
        criterion(2, "metric oracles", Duration::from_secs(30), metric_oracles),
        criterion(3, "gradient check", Duration::from_secs(60), gradient_check),
        criterion(4, "overfit", Duration::from_secs(180), overfit),
        criterion(5, "matching", Duration::from_secs(360), matching),
        criterion(
            6,
            "greedy soup guarantee",
            Duration::from_secs(10),
            soup_guarantee,
        ),
        criterion(7, "truncation property", Duration::from_secs(5), truncation),
        criterion(8, "five-trick ablation", Duration::from_secs(900), ablation),
        criterion(
            9,
            "artifact round trip and resume",
            Duration::from_secs(180),
            round_trip_and_resume,
        ),
        criterion(10, "lora contract", Duration::from_secs(60), lora_contract),
        criterion(11, "realtime path", Duration::from_secs(60), realtime),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// 1 ------------------------------------------------------------------------

fn preset_fidelity() -> Outcome {
    let golden = PresetConfig {
        batch_size: 128,
        learning_rate: 1e-4,
        lr_choice: LrChoice::LayerwiseDecay,
        layerwise_lr_decay: 0.9,
        lr_multiplier: 0.1,
        weight_decay: 0.001,
        gradient_clip_val: 1.0,
        lr_schedule: LrSchedule::CosineDecay,
        lr_steps: Vec::new(),
        warmup_steps: 0.1,
        patience: 10,
        val_check_interval: 0.5,
        max_epochs: 10,
        pooling_mode: PoolingMode::Cls,
        precision: "16-mixed".into(),
        tricks: TrickToggles::ALL,
        lora: None,
        top_k: 3,
        backbone_dim: 64,
        backbone_depth: 2,
        fusion_dim: 128,
        max_text_len: 128,
        image_size: 32,
        seed: 0,
    };
    ensure(PresetConfig::default() == golden, || {
        format!("{:?}", PresetConfig::default())
    })?;
    for p in [
        ProblemType::Binary,
        ProblemType::Multiclass,
        ProblemType::Regression,
    ] {
        ensure(
            PresetConfig::for_problem(p, Quality::HighQuality) == golden,
            || format!("{p} preset differs"),
        )?;
    }
    Ok("default classification/regression preset matches field for field".into())
}

// 2 ------------------------------------------------------------------------

const ORACLE_TOL: f64 = 1e-12;

fn oracle_r2(y: &[f64], yhat: &[f64]) -> f64 {
    let n = y.len() as f64;
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    // Variance from all pairwise differences.
    let mut pair = 0.0;
    for a in y {
        for b in y {
            pair += (a - b) * (a - b);
        }
    }
    let sst = pair / (2.0 * n);
    1.0 - sse / sst
}

fn oracle_f1(y: &[u8], yhat: &[u8], pos: u8) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (a, b) in y.iter().zip(yhat) {
        match (*a == pos, *b == pos) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / (tp + fp);
    let r = tp / (tp + fn_);
    2.0 * p * r / (p + r)
}

fn oracle_f1_weighted(y: &[u8], yhat: &[u8]) -> f64 {
    let n = y.len() as f64;
    (0u8..=u8::MAX)
        .filter(|c| y.contains(c))
        .map(|c| y.iter().filter(|&&v| v == c).count() as f64 / n * oracle_f1(y, yhat, c))
        .sum()
}

fn oracle_auc(y: &[bool], s: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                if s[i] > s[j] {
                    wins += 1.0;
                } else if s[i] == s[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn oracle_recall_mean(q: &[Vec<f64>], g: &[Vec<f64>], gt: &[usize], ks: &[usize]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let ranks: Vec<usize> = q
        .iter()
        .zip(gt)
        .map(|(qv, &t)| {
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| cos(qv, &g[b]).total_cmp(&cos(qv, &g[a])).then(a.cmp(&b)));
            order.iter().position(|&i| i == t).unwrap()
        })
        .collect();
    let recalls: Vec<f64> = ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
        .collect();
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

fn metric_oracles() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= ORACLE_TOL;
    // Hand-derived fixtures.
    ensure(
        metrics::r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() == 0.5,
        || "r2 hand fixture".into(),
    )?;
    ensure(
        close(
            metrics::f1_binary(&[1, 1, 0, 0], &[1, 0, 0, 0], &1).unwrap(),
            2.0 / 3.0,
        ),
        || "f1 hand".into(),
    )?;
    ensure(
        close(
            metrics::f1_weighted(&["A", "A", "B", "B"], &["A", "B", "B", "B"]).unwrap(),
            11.0 / 15.0,
        ),
        || "f1_weighted hand".into(),
    )?;
    ensure(
        metrics::roc_auc(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1]).unwrap() == 0.75,
        || "auc hand".into(),
    )?;
    let q = vec![vec![1.0, 0.0]];
    let mut g: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, 0.0]).collect();
    g.push(vec![1.0, 0.5]);
    g.extend((0..4).map(|_| vec![0.0, 1.0]));
    ensure(
        close(
            metrics::recall_at_k_mean(&q, &g, &[5], &[1, 5, 10]).unwrap(),
            1.0 / 3.0,
        ),
        || "recall hand".into(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut check = |name: &str, i: usize, got: f64, want: f64| -> Result<(), String> {
        worst = worst.max((got - want).abs());
        ensure(close(got, want), || {
            format!("{name} fixture {i}: {got} vs oracle {want}")
        })
    };
    for i in 0..500 {
        let n = rng.random_range(2..=50);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let yhat: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        check(
            "r2",
            i,
            metrics::r2(&y, &yhat).unwrap(),
            oracle_r2(&y, &yhat),
        )?;

        let n = rng.random_range(1..=50);
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let yhat: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        check(
            "f1",
            i,
            metrics::f1_binary(&y, &yhat, &1).unwrap(),
            oracle_f1(&y, &yhat, 1),
        )?;

        let classes = rng.random_range(2..6);
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let yhat: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        check(
            "f1_weighted",
            i,
            metrics::f1_weighted(&y, &yhat).unwrap(),
            oracle_f1_weighted(&y, &yhat),
        )?;

        let n = rng.random_range(2..=50);
        let mut y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        y[0] = true;
        y[1] = false;
        let levels = rng.random_range(2..12);
        let s: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        check(
            "roc_auc",
            i,
            metrics::roc_auc(&y, &s).unwrap(),
            oracle_auc(&y, &s),
        )?;

        let gallery_n = rng.random_range(10..=50);
        let dim = rng.random_range(2..5);
        let mut gallery: Vec<Vec<f64>> = (0..gallery_n)
            .map(|_| (0..dim).map(|_| rng.random_range(-3..=3) as f64).collect())
            .collect();
        for v in &mut gallery {
            if v.iter().all(|x| *x == 0.0) {
                v[0] = 1.0;
            }
        }
        let nq = rng.random_range(1..=10);
        let gt: Vec<usize> = (0..nq).map(|_| rng.random_range(0..gallery_n)).collect();
        let queries: Vec<Vec<f64>> = gt
            .iter()
            .map(|&t| {
                gallery[t]
                    .iter()
                    .map(|x| x + rng.random_range(-2..=2) as f64 * 0.5)
                    .collect()
            })
            .map(|v: Vec<f64>| {
                if v.iter().all(|x| *x == 0.0) {
                    vec![1.0; dim]
                } else {
                    v
                }
            })
            .collect();
        let ks = [1, 5, 10];
        check(
            "recall_at_k_mean",
            i,
            metrics::recall_at_k_mean(&queries, &gallery, &gt, &ks).unwrap(),
            oracle_recall_mean(&queries, &gallery, &gt, &ks),
        )?;
    }
    Ok(format!(
        "5 metrics x 500 fixtures plus hand fixtures, max abs deviation {worst:.1e}"
    ))
}

// 3 ------------------------------------------------------------------------

fn batch_of(table: &MultimodalTable, state: &PipelineState, rows: &[usize]) -> Batch {
    let samples: Vec<_> = rows
        .iter()
        .map(|&r| {
            state
                .transform_sample(table, r, false, &mut sample_rng(0, 0, r as u64))
                .unwrap()
        })
        .collect();
    collate(&samples).unwrap()
}

fn small_pipeline(table: &MultimodalTable, label: &str, preset: &PresetConfig) -> PipelineState {
    let labels = &table.column(label).unwrap().values;
    let problem =
        fuselite::table::infer_problem_type(labels, &DetectionThresholds::default()).unwrap();
    let schema =
        TableSchema::infer(table, Some(label), problem, &DetectionThresholds::default()).unwrap();
    fit_pipeline(table, &schema, preset).unwrap()
}

fn gradient_check() -> Outcome {
    let table = synth::overfit_table(32, 3);
    let preset = PresetConfig {
        backbone_dim: 16,
        backbone_depth: 1,
        fusion_dim: 16,
        image_size: 8,
        ..PresetConfig::default()
    };
    let state = small_pipeline(&table, "label", &preset);
    ensure(
        !state.image_columns.is_empty()
            && !state.text_columns.is_empty()
            && !(state.numeric_stats.is_empty() && state.categorical_vocab.is_empty()),
        || "fixture lacks a modality".into(),
    )?;
    let model = build_fusion_model(&state, &preset, 0).unwrap();
    let batch = batch_of(&table, &state, &[0, 5, 10, 15]);
    let targets = [0usize, 1, 2, 1];
    let loss = |ps: &ParamStore, grads: bool| {
        let mut m = model.clone();
        m.params = ps.clone();
        let mut g = Graph::new(&m.params, grads);
        let (out, _) = m.forward_graph(&mut g, &batch).unwrap();
        let l = g.tape.cross_entropy(out, &targets);
        let v = g.tape.value(l).item();
        (v, grads.then(|| g.param_grads(l)))
    };
    let (_, grads) = loss(&model.params, true);
    let grads = grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    let (mut checked, mut worst) = (0, 0.0f64);
    for (i, p) in model.params.iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        for _ in 0..3 {
            let j = rng.random_range(0..p.value.len());
            let shifted = |d: f64| {
                let mut ps = model.params.clone();
                ps.iter_mut().nth(i).unwrap().value.data_mut()[j] += d;
                loss(&ps, false).0
            };
            let num = (shifted(h) - shifted(-h)) / (2.0 * h);
            let ana = g.data()[j];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
            ensure(rel <= 1e-4, || {
                format!("{}[{j}]: analytic {ana}, numeric {num}", p.name)
            })?;
        }
    }
    Ok(format!(
        "{checked} coordinates over {} tensors, worst relative error {worst:.1e}",
        model.params.len()
    ))
}

// 4 ------------------------------------------------------------------------

fn brightness(cell: &Cell) -> f64 {
    let Cell::Bytes(b) = cell else {
        panic!("image bytes expected")
    };
    let img = image::load_from_memory(b).unwrap().to_luma8();
    img.pixels().map(|p| p.0[0] as f64).sum::<f64>() / (img.width() * img.height()) as f64 / 255.0
}

/// Softmax regression on one-hot `kind` plus image brightness.
fn logistic_baseline(table: &MultimodalTable) -> f64 {
    let kinds = &table.column("kind").unwrap().values;
    let photos = &table.column("photo").unwrap().values;
    let labels: Vec<String> = table
        .column("label")
        .unwrap()
        .values
        .iter()
        .map(|c| c.to_string())
        .collect();
    let mut classes = labels.clone();
    classes.sort();
    classes.dedup();
    let mut cats: Vec<String> = kinds.iter().map(|c| c.to_string()).collect();
    cats.sort();
    cats.dedup();
    let x: Vec<Vec<f64>> = (0..table.n_rows())
        .map(|r| {
            let mut v: Vec<f64> = cats
                .iter()
                .map(|c| f64::from(*c == kinds[r].to_string()))
                .collect();
            v.push(brightness(&photos[r]));
            v.push(1.0);
            v
        })
        .collect();
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l).unwrap())
        .collect();
    let (d, k) = (x[0].len(), classes.len());
    let mut w = vec![vec![0.0; d]; k];
    for _ in 0..3000 {
        let mut grad = vec![vec![0.0; d]; k];
        for (xi, &yi) in x.iter().zip(&y) {
            let z: Vec<f64> = w
                .iter()
                .map(|wk| wk.iter().zip(xi).map(|(a, b)| a * b).sum())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                let p = e[c] / s - f64::from(c == yi);
                for j in 0..d {
                    grad[c][j] += p * xi[j];
                }
            }
        }
        for c in 0..k {
            for j in 0..d {
                w[c][j] -= 0.5 * grad[c][j] / x.len() as f64;
            }
        }
    }
    let pred: Vec<usize> = x
        .iter()
        .map(|xi| {
            let z: Vec<f64> = w
                .iter()
                .map(|wk| wk.iter().zip(xi).map(|(a, b)| a * b).sum())
                .collect();
            (0..k).fold(0, |best, c| if z[c] > z[best] { c } else { best })
        })
        .collect();
    metrics::f1_weighted(&y, &pred).unwrap()
}

fn overfit() -> Outcome {
    let table = synth::overfit_table(32, 7);
    let baseline = logistic_baseline(&table);
    ensure(baseline >= 0.95, || {
        format!("logistic baseline only reaches {baseline:.3}")
    })?;
    // Default preset; the step budget replaces the 10-epoch default and
    // early stopping is disabled so all 200 steps are available.
    let opts = FitOptions {
        tuning_data: Some(table.clone()),
        ..FitOptions::default()
    }
    .with_override("max_epochs", 200)
    .with_override("patience", 1000);
    let mut p = Predictor::new("label");
    p.fit(&table, &opts).unwrap();
    let steps = p.history().len();
    let y: Vec<String> = table
        .column("label")
        .unwrap()
        .values
        .iter()
        .map(|c| c.to_string())
        .collect();
    let yhat: Vec<String> = p
        .predict(&table)
        .unwrap()
        .iter()
        .map(|c| c.to_string())
        .collect();
    let f1 = metrics::f1_weighted(&y, &yhat).unwrap();
    ensure(steps <= 200, || format!("{steps} steps"))?;
    ensure(f1 >= 0.95, || {
        format!("train weighted F1 {f1:.4} after {steps} steps")
    })?;
    Ok(format!(
        "train weighted F1 {f1:.4} in {steps} steps; logistic baseline {baseline:.3}"
    ))
}

// 5 ------------------------------------------------------------------------

fn matching() -> Outcome {
    let train = synth::iim_pairs(200, 4, 3);
    let val = synth::iim_pairs(200, 4, 103);
    let spec = MatchingSpec {
        problem_type: ProblemType::Iim,
        query_column: "left".into(),
        response_column: "right".into(),
        label: Some("match".into()),
    };
    let opts = FitOptions {
        tuning_data: Some(val.clone()),
        ..FitOptions::default()
    }
    .with_override("batch_size", 32)
    .with_override("max_epochs", 20);
    let start = Instant::now();
    let iim = Predictor::fit_matching(&train, spec, &opts).unwrap();
    let auc = iim.evaluate(&val).unwrap()["roc_auc"];
    let iim_time = start.elapsed();

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
    .with_override("max_epochs", 100)
    .with_override("learning_rate", 1e-3)
    .with_override("patience", 1000);
    let start = Instant::now();
    let itm = Predictor::fit_matching(&pairs, spec, &opts).unwrap();
    let recall = itm.evaluate(&pairs).unwrap()["recall_at_k_mean"];
    let tim = itm
        .evaluate_with(
            &pairs,
            &EvalOptions {
                direction: RetrievalDirection::ResponseToQuery,
                ..Default::default()
            },
        )
        .unwrap()["recall_at_k_mean"];
    let itm_time = start.elapsed();
    let limit = Duration::from_secs(180);
    ensure(iim_time < limit && itm_time < limit, || {
        format!("IIM {iim_time:.1?}, ITM {itm_time:.1?}")
    })?;
    ensure(auc >= 0.9, || format!("IIM val ROC-AUC {auc:.4}"))?;
    ensure(recall >= 0.8, || {
        format!("ITM mean recall@{{1,5,10}} {recall:.4}")
    })?;
    Ok(format!("IIM val ROC-AUC {auc:.4} ({iim_time:.1?}); ITM mean recall {recall:.4}, TIM {tim:.4} ({itm_time:.1?})"))
}

// 6 ------------------------------------------------------------------------

fn quadratic<'a>(
    center: &'a [f64],
    curv: &'a [f64],
    offset: f64,
) -> impl Fn(&[Tensor]) -> f64 + 'a {
    move |w: &[Tensor]| {
        offset
            - w[0]
                .data()
                .iter()
                .zip(center)
                .zip(curv)
                .map(|((x, c), a)| a * (x - c).powi(2))
                .sum::<f64>()
    }
}

fn soup_guarantee() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut grew = 0;
    for i in 0..200 {
        let dim = rng.random_range(1..5);
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let curv: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..3.0)).collect();
        let offset = rng.random_range(-1.0..1.0);
        let eval = quadratic(&center, &curv, offset);
        let checkpoints: Vec<CheckpointRecord> = (0..rng.random_range(1..6))
            .map(|s| {
                let w = vec![Tensor::new(
                    vec![dim],
                    (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
                )];
                CheckpointRecord {
                    step: s as u64 + 1,
                    val_score: eval(&w),
                    weights: w,
                }
            })
            .collect();
        let best = checkpoints
            .iter()
            .map(|c| c.val_score)
            .fold(f64::NEG_INFINITY, f64::max);
        let soup = greedy_soup(&checkpoints, |w| Ok(eval(w))).unwrap();
        ensure(soup.score >= best, || {
            format!("instance {i}: soup {} < best {best}", soup.score)
        })?;
        ensure(eval(&soup.weights) == soup.score, || {
            format!("instance {i}: reported score is stale")
        })?;
        grew += usize::from(soup.members.len() > 1);
    }
    // Midpoint: both checkpoints sit at distance 1 from the optimum.
    let center = [1.0];
    let curv = [1.0];
    let eval = quadratic(&center, &curv, 0.0);
    let cps: Vec<CheckpointRecord> = [0.0, 2.0]
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let w = vec![Tensor::new(vec![1], vec![x])];
            CheckpointRecord {
                step: i as u64 + 1,
                val_score: eval(&w),
                weights: w,
            }
        })
        .collect();
    let mid = greedy_soup(&cps, |w| Ok(eval(w))).unwrap();
    ensure(mid.members.len() == 2, || {
        format!("midpoint members {:?}", mid.members)
    })?;
    Ok(format!("200 random instances never below best single ({grew} grew past one member); midpoint admits 2"))
}

// 7 ------------------------------------------------------------------------

fn truncation() -> Outcome {
    use fuselite::pipeline::{truncated_lengths, truncation_removals};
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let fields = rng.random_range(1..7);
        let lengths: Vec<usize> = (0..fields).map(|_| rng.random_range(0..40)).collect();
        let total: usize = lengths.iter().sum();
        let budget = rng.random_range(0..=total + 10);
        let removals = truncation_removals(&lengths, budget);
        let out = truncated_lengths(&lengths, budget);
        let out_total: usize = out.iter().sum();
        ensure(out_total <= budget, || {
            format!("case {case}: {out_total} > {budget}")
        })?;
        ensure(out.iter().zip(&lengths).all(|(a, b)| a <= b), || {
            format!("case {case}: field grew")
        })?;
        ensure(removals.len() == total.saturating_sub(budget), || {
            format!("case {case}: removal count")
        })?;
        let mut cur = lengths.clone();
        for &f in &removals {
            let longest = *cur.iter().max().unwrap();
            ensure(cur[f] == longest && cur[f] > 0, || {
                format!("case {case}: removed from a shorter field")
            })?;
            cur[f] -= 1;
        }
        ensure(cur == out, || format!("case {case}: replay differs"))?;
    }
    Ok("1000 random cases".into())
}

// 8 ------------------------------------------------------------------------

fn ablation() -> Outcome {
    let table = synth::overfit_table(32, 7);
    let opts = FitOptions::default()
        .with_override("max_epochs", 80)
        .with_override("patience", 1000);
    let report = run_ablation("overfit-32", &table, &table, "label", &opts, &[0, 1]).unwrap();
    let mut violations = Vec::new();
    for run in &report.runs {
        for v in check_mechanics(run) {
            violations.push(format!("{} seed {}: {v}", run.column.header(), run.seed));
        }
    }
    for line in report.to_markdown().lines() {
        report_line(line);
    }
    ensure(report.runs.len() == 14, || {
        format!("{} runs", report.runs.len())
    })?;
    ensure(violations.is_empty(), || {
        violations[..violations.len().min(5)].join("; ")
    })?;
    Ok(format!(
        "{} runs, all per-step mechanics hold",
        report.runs.len()
    ))
}

fn report_line(line: &str) {
    report(&format!("    {line}"));
}

// 9 ------------------------------------------------------------------------

fn round_trip_and_resume() -> Outcome {
    let train = synth::overfit_table(32, 9);
    let tuning = synth::overfit_table(16, 90);
    // 32 rows at batch 8 give 4 steps per epoch: 100 steps in 25 epochs.
    let opts = FitOptions {
        preset: Some(Quality::MediumQuality),
        tuning_data: Some(tuning.clone()),
        seed: 9,
        ..FitOptions::default()
    }
    .with_override("batch_size", 8)
    .with_override("max_epochs", 25)
    .with_override("patience", 1000)
    .with_override("learning_rate", 1e-3);

    let mut full = Predictor::new("label");
    full.fit(&train, &opts).unwrap();
    ensure(full.history().len() == 100, || {
        format!("{} steps", full.history().len())
    })?;

    let dir = tempfile::tempdir().unwrap();
    full.save(dir.path()).unwrap();
    let loaded = Predictor::load(dir.path(), false).unwrap();
    ensure(
        loaded.predict(&tuning).unwrap() == full.predict(&tuning).unwrap(),
        || "predict differs".into(),
    )?;
    ensure(
        loaded.predict_proba(&tuning).unwrap() == full.predict_proba(&tuning).unwrap(),
        || "predict_proba differs".into(),
    )?;

    let killed_dir = tempfile::tempdir().unwrap();
    let killed = FitOptions {
        save_path: Some(killed_dir.path().to_path_buf()),
        interrupt_after: Some(50),
        ..opts.clone()
    };
    Predictor::new("label").fit(&train, &killed).unwrap();
    let mut resumed = Predictor::load(killed_dir.path(), true).unwrap();
    ensure(resumed.has_pending_run(), || {
        "artifact has no pending run".into()
    })?;
    resumed.fit(&train, &opts).unwrap();
    let steps: Vec<u64> = resumed.history().iter().map(|r| r.step).collect();
    ensure(steps == (1..=100).collect::<Vec<_>>(), || {
        format!("history steps {steps:?}")
    })?;
    ensure(resumed.history() == full.history(), || {
        "history differs from the uninterrupted run".into()
    })?;
    ensure(
        resumed.params().unwrap().snapshot() == full.params().unwrap().snapshot(),
        || "final weights differ".into(),
    )?;
    Ok("load(save(p)) predicts identically; kill at 50, resume gives steps 1..=100 and identical weights".into())
}

// 10 -----------------------------------------------------------------------

fn lora_contract() -> Outcome {
    let table = synth::text_table(40, 10);
    let (dim, depth) = Quality::BestQuality.backbone_size();
    let preset = PresetConfig {
        backbone_dim: dim,
        backbone_depth: depth,
        ..PresetConfig::default()
    };
    let state = small_pipeline(&table, "sentiment", &preset);
    let mut model = build_fusion_model(&state, &preset, 0).unwrap();
    let batch = batch_of(&table, &state, &[0, 1, 2, 3]);
    let before = model.forward(&batch).unwrap();
    let cfg = LoraConfig::default();
    ensure(cfg.rank == 32 && cfg.alpha == 32.0, || format!("{cfg:?}"))?;
    inject_lora(&mut model, &cfg).unwrap();
    ensure(model.forward(&batch).unwrap() == before, || {
        "injection changed the output".into()
    })?;

    let backbone = |ps: &ParamStore, trainable: bool| -> usize {
        ps.iter()
            .filter(|p| p.group == ParamGroup::Backbone && (!trainable || p.trainable))
            .map(|p| p.value.len())
            .sum()
    };
    let (train, total) = (
        backbone(&model.params, true),
        backbone(&model.params, false),
    );
    let frac = train as f64 / total as f64;
    ensure(frac < 0.10, || {
        format!("trainable backbone fraction {frac:.4}")
    })?;

    let lora = serde_json::to_value(&cfg).unwrap();
    let fit = |epochs: usize| {
        let opts = FitOptions {
            preset: Some(Quality::BestQuality),
            ..FitOptions::default()
        }
        .with_override("lora", lora.clone())
        .with_override("batch_size", 8)
        .with_override("max_epochs", epochs)
        .with_override("learning_rate", 1e-3);
        let mut p = Predictor::new("sentiment");
        p.fit(&table, &opts).unwrap();
        p
    };
    let (short, long) = (fit(1), fit(3));
    let (a, b) = (short.params().unwrap(), long.params().unwrap());
    let mut frozen = 0;
    let mut moved = 0;
    for (pa, pb) in a.iter().zip(b.iter()) {
        if pa.trainable {
            moved += usize::from(pa.value != pb.value);
        } else {
            frozen += 1;
            ensure(pa.value == pb.value, || {
                format!("frozen {} changed", pa.name)
            })?;
        }
    }
    ensure(frozen > 0 && moved > 0, || {
        format!("{frozen} frozen, {moved} trained tensors")
    })?;
    Ok(format!(
        "no-op at injection; {frozen} frozen tensors bit-stable; trainable backbone fraction {:.2}% ({train}/{total})",
        100.0 * frac
    ))
}

// 11 -----------------------------------------------------------------------

fn realtime() -> Outcome {
    let table = synth::overfit_table(64, 11);
    let opts = FitOptions::default().with_override("max_epochs", 1);
    let mut p = Predictor::new("label");
    p.fit(&table, &opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut rt, mut batch) = (Vec::new(), Vec::new());
    for i in 0..100 {
        let row = table.select_rows(&[rng.random_range(0..table.n_rows())]);
        let time = |f: &dyn Fn() -> Vec<Cell>, acc: &mut Vec<Duration>| {
            let s = Instant::now();
            let out = f();
            acc.push(s.elapsed());
            out
        };
        let fast = || p.predict_realtime(&row).unwrap();
        let slow = || p.predict(&row).unwrap();
        let (a, b) = if i % 2 == 0 {
            let a = time(&fast, &mut rt);
            (a, time(&slow, &mut batch))
        } else {
            let b = time(&slow, &mut batch);
            (time(&fast, &mut rt), b)
        };
        ensure(a == b, || format!("row {i}: realtime {a:?} vs batch {b:?}"))?;
    }
    rt.sort();
    batch.sort();
    let (m_rt, m_batch) = (rt[rt.len() / 2], batch[batch.len() / 2]);
    ensure(m_rt < m_batch, || {
        format!("median realtime {m_rt:?} not below batch {m_batch:?}")
    })?;
    Ok(format!(
        "100 rows identical; median latency realtime {m_rt:.2?} vs batch {m_batch:.2?}"
    ))
}
