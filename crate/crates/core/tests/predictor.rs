use fuselite::metrics::{MetricName, MetricSpec};
use fuselite::models::Side;
use fuselite::predictor::*;
use fuselite::synth;
use fuselite::table::{Cell, ProblemType};
use fuselite::trainer::TrainStatus;
use fuselite::Error;

fn weights(p: &Predictor) -> Vec<fuselite::tensor::Tensor> {
    p.params().unwrap().snapshot()
}

fn tiny(epochs: usize) -> FitOptions {
    FitOptions::default()
        .with_override("backbone_dim", 16)
        .with_override("backbone_depth", 1)
        .with_override("fusion_dim", 16)
        .with_override("max_text_len", 16)
        .with_override("image_size", 16)
        .with_override("batch_size", 8)
        .with_override("learning_rate", 1e-3)
        .with_override("max_epochs", epochs)
}

#[test]
fn three_call_quickstart() {
    let data = synth::text_table(40, 1);
    let mut p = Predictor::new("sentiment");
    p.fit(&data, &tiny(2)).unwrap();
    let preds = p.predict(&data).unwrap();
    assert_eq!(preds.len(), 40);
    assert!(preds
        .iter()
        .all(|c| matches!(c.as_text(), Some("positive" | "negative"))));
    assert_eq!(p.problem_type(), Some(ProblemType::Binary));
    assert_eq!(p.metric(), Some(MetricName::F1));
    let report = p.evaluate(&data).unwrap();
    assert!(report.contains_key("f1"));
}

#[test]
fn regression_reports_r2() {
    let data = synth::regression_table(48, 2);
    let mut p = Predictor::new("y");
    p.fit(&data, &tiny(3)).unwrap();
    assert_eq!(p.problem_type(), Some(ProblemType::Regression));
    let report = p.evaluate(&data).unwrap();
    assert!(report["r2"].is_finite());
    assert!(matches!(
        p.predict_proba(&data),
        Err(Error::ProbaOnRegression)
    ));
    assert!(p
        .predict(&data)
        .unwrap()
        .iter()
        .all(|c| c.as_number().is_some()));
}

#[test]
fn proba_rows_sum_to_one_and_embedding_width() {
    let data = synth::overfit_table(24, 3);
    let mut p = Predictor::new("label");
    p.fit(&data, &tiny(1)).unwrap();
    let proba = p.predict_proba(&data).unwrap();
    let classes = p.class_labels().unwrap();
    for row in &proba {
        assert_eq!(row.len(), classes.len());
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let emb = p.extract_embedding(&data).unwrap();
    assert_eq!(emb.shape(), &[24, 16]);
}

#[test]
fn evaluate_is_deterministic() {
    let data = synth::text_table(32, 4);
    let mut p = Predictor::new("sentiment");
    p.fit(&data, &tiny(1)).unwrap();
    assert_eq!(p.evaluate(&data).unwrap(), p.evaluate(&data).unwrap());
}

#[test]
fn missing_label_and_schema_errors() {
    let data = synth::text_table(32, 5);
    let mut p = Predictor::new("nope");
    assert!(matches!(
        p.fit(&data, &tiny(1)),
        Err(Error::MissingLabelColumn(_))
    ));

    let mut p = Predictor::new("sentiment");
    p.fit(&data, &tiny(1)).unwrap();
    let unlabeled = data.without_column("sentiment");
    assert!(matches!(
        p.evaluate(&unlabeled),
        Err(Error::MissingLabelColumn(_))
    ));
    let wrong = synth::regression_table(8, 0);
    assert!(matches!(p.predict(&wrong), Err(Error::SchemaMismatch(_))));
}

#[test]
fn continued_fit_extends_step_numbering() {
    let data = synth::text_table(40, 6);
    let mut p = Predictor::new("sentiment");
    p.fit(&data, &tiny(1)).unwrap();
    let first = p.history().len() as u64;
    p.fit(&data, &tiny(1)).unwrap();
    let steps: Vec<u64> = p.history().iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=2 * first).collect::<Vec<_>>());
    let locked = tiny(1).with_override("backbone_dim", 32);
    assert!(matches!(
        p.fit(&data, &locked),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn save_load_round_trip_is_exact() {
    let data = synth::overfit_table(24, 7);
    let mut p = Predictor::new("label");
    p.fit(&data, &tiny(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    p.save(dir.path()).unwrap();
    let q = Predictor::load(dir.path(), false).unwrap();
    assert_eq!(p.predict(&data).unwrap(), q.predict(&data).unwrap());
    assert_eq!(
        p.predict_proba(&data).unwrap(),
        q.predict_proba(&data).unwrap()
    );
    assert_eq!(p.history(), q.history());

    let again = tempfile::tempdir().unwrap();
    q.save(again.path()).unwrap();
    for f in [
        "metadata.json",
        "weights.bin",
        "weights.manifest.json",
        "pipeline.json",
        "history.jsonl",
    ] {
        let a = std::fs::read(dir.path().join(f)).unwrap();
        let b = std::fs::read(again.path().join(f)).unwrap();
        assert!(a == b, "{f} differs after load and save");
    }
}

#[test]
fn corrupt_artifact_is_rejected() {
    let data = synth::text_table(24, 8);
    let mut p = Predictor::new("sentiment");
    p.fit(&data, &tiny(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    p.save(dir.path()).unwrap();
    let bin = dir.path().join("weights.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(
        Predictor::load(dir.path(), false),
        Err(Error::CorruptArtifact { .. })
    ));
}

#[test]
fn resume_after_kill_matches_uninterrupted_run() {
    let data = synth::text_table(40, 9);
    // 32 training rows at batch 8 -> 4 steps per epoch, 100 steps total.
    let opts = tiny(25).with_override("patience", 1000);
    let mut full = Predictor::new("sentiment");
    full.fit(&data, &opts).unwrap();
    assert_eq!(full.history().len(), 100);

    let dir = tempfile::tempdir().unwrap();
    let killed = FitOptions {
        save_path: Some(dir.path().to_path_buf()),
        interrupt_after: Some(50),
        ..opts.clone()
    };
    let mut p = Predictor::new("sentiment");
    p.fit(&data, &killed).unwrap();
    assert_eq!(p.status(), Some(TrainStatus::Interrupted));
    drop(p);

    let mut resumed = Predictor::load(dir.path(), true).unwrap();
    assert!(resumed.has_pending_run());
    resumed.fit(&data, &opts).unwrap();
    let steps: Vec<u64> = resumed.history().iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=100).collect::<Vec<_>>());
    assert_eq!(resumed.status(), Some(TrainStatus::Completed));
    assert_eq!(resumed.history(), full.history());
    assert_eq!(weights(&resumed), weights(&full));
}

#[test]
fn realtime_matches_batch_and_limits_rows() {
    let data = synth::overfit_table(40, 10);
    let mut p = Predictor::new("label");
    p.fit(&data, &tiny(1)).unwrap();
    for i in 0..data.n_rows() {
        let row = data.select_rows(&[i]);
        assert_eq!(p.predict_realtime(&row).unwrap(), p.predict(&row).unwrap());
    }
    assert!(p
        .predict_realtime(&data.select_rows(&[]))
        .unwrap()
        .is_empty());
    let too_many: Vec<usize> = (0..REALTIME_MAX_ROWS + 1).map(|i| i % 40).collect();
    assert!(matches!(
        p.predict_realtime(&data.select_rows(&too_many)),
        Err(Error::InvalidTable(_))
    ));
}

#[test]
fn random_search_is_deterministic_and_keeps_best() {
    let data = synth::text_table(32, 11);
    let spec = RandomSearchSpec {
        trials: 3,
        ..RandomSearchSpec::default()
    };
    let opts = tiny(1).with_override("backbone_dim", 16);
    let mut space = spec.clone();
    space.space.remove("backbone_dim");
    space.space.remove("batch_size");
    let (a, log_a) = random_search(&data, "sentiment", &space, &opts, 3).unwrap();
    let (b, log_b) = random_search(&data, "sentiment", &space, &opts, 3).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(weights(&a), weights(&b));
    let best = log_a
        .iter()
        .map(|t| t.val_score)
        .fold(f64::NEG_INFINITY, f64::max);
    let first_best = log_a.iter().find(|t| t.val_score == best).unwrap();
    assert_eq!(
        a.preset().unwrap().learning_rate,
        first_best.overrides["learning_rate"].as_f64().unwrap()
    );
}

#[test]
fn single_trial_search_equals_plain_fit() {
    let data = synth::text_table(32, 12);
    let spec = RandomSearchSpec {
        trials: 1,
        space: [("weight_decay".to_string(), vec![serde_json::json!(0.0)])].into(),
    };
    let (searched, _) = random_search(&data, "sentiment", &spec, &tiny(1), 0).unwrap();
    let mut plain = Predictor::new("sentiment");
    plain
        .fit(&data, &tiny(1).with_override("weight_decay", 0.0))
        .unwrap();
    assert_eq!(weights(&searched), weights(&plain));
}

#[test]
fn itm_direction_flag_swaps_roles() {
    let data = synth::itm_pairs(16, 13);
    let spec = MatchingSpec {
        problem_type: ProblemType::Itm,
        query_column: "image".into(),
        response_column: "caption".into(),
        label: None,
    };
    let opts = FitOptions {
        tuning_data: Some(data.clone()),
        ..tiny(1)
    };
    let p = Predictor::fit_matching(&data, spec, &opts).unwrap();
    let forward = p.evaluate(&data).unwrap();
    let reverse = p
        .evaluate_with(
            &data,
            &EvalOptions {
                direction: RetrievalDirection::ResponseToQuery,
                ..Default::default()
            },
        )
        .unwrap();
    assert!(forward.contains_key("recall@1") && reverse.contains_key("recall@1"));
    let q = p.extract_item_embedding(&data, Side::Query).unwrap();
    let r = p.extract_item_embedding(&data, Side::Response).unwrap();
    assert_eq!(q.shape(), r.shape());
    let f1 = p.evaluate_with(
        &data,
        &EvalOptions {
            metric: Some(MetricSpec::new(MetricName::F1)),
            ..Default::default()
        },
    );
    assert!(f1.is_err());
}

#[test]
fn labeled_matching_predicts_binary() {
    let data = synth::iim_pairs(40, 4, 14);
    let spec = MatchingSpec {
        problem_type: ProblemType::Iim,
        query_column: "left".into(),
        response_column: "right".into(),
        label: Some("match".into()),
    };
    let p = Predictor::fit_matching(&data, spec, &tiny(1)).unwrap();
    let preds = p.predict(&data).unwrap();
    assert!(preds
        .iter()
        .all(|c| matches!(c, Cell::Number(v) if *v == 0.0 || *v == 1.0)));
    for row in p.predict_proba(&data).unwrap() {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
    }
    assert!(p.evaluate(&data).unwrap().contains_key("roc_auc"));
}

#[test]
fn ablation_runs_every_column_and_mechanics_hold() {
    let data = synth::overfit_table(24, 15);
    let report = run_ablation("overfit", &data, &data, "label", &tiny(3), &[0, 1]).unwrap();
    assert_eq!(report.runs.len(), 14);
    for run in &report.runs {
        let bad = check_mechanics(run);
        assert!(bad.is_empty(), "{}: {bad:?}", run.column.name);
    }
    let table = report.to_markdown();
    assert_eq!(table.lines().next().unwrap().matches('|').count(), 9);
    assert!(table.contains("+ greedy_soup"));
}
