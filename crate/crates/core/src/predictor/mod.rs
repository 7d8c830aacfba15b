//! The user-facing predictor: fit, evaluate, predict, predict_proba,
//! extract_embedding, save, load and resume, plus semantic matching and a
//! random-search hook.

mod ablation;
mod artifact;
mod search;
mod tasks;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ResultExt};
use crate::metrics::{self, MetricName, MetricSpec, ScoreReport};
use crate::models::{
    build_biencoder, build_fusion_model, inject_lora, BiEncoderModel, FusionModel, ParamStore, Side,
};
use crate::pipeline::{fit_pipeline, Batch, LabelCodec, PipelineState};
use crate::table::{
    drop_null_labels, infer_column_modality, infer_problem_type, split_train_val, Cell,
    ColumnSchema, DetectionThresholds, MultimodalTable, ProblemType, TableSchema,
};
use crate::tensor::Tensor;
use crate::trainer::{
    steps_per_epoch, train, CheckpointRecord, HistoryRecord, PresetConfig, Quality, TrainOptions,
    TrainState, TrainStatus,
};

pub use ablation::{check_mechanics, run_ablation, AblationColumn, AblationReport, AblationRun};
pub use search::{random_search, RandomSearchSpec, TrialRecord};
pub use tasks::CONTRASTIVE_MARGIN;

use tasks::{MatchingTask, SupervisedTask};

/// Minimum number of labeled rows `fit` accepts.
pub const MIN_TRAIN_ROWS: usize = 8;
/// Largest batch `predict_realtime` accepts.
pub const REALTIME_MAX_ROWS: usize = 32;
/// Default validation fraction when no tuning data is given.
pub const DEFAULT_HOLDOUT: f64 = 0.2;
/// Cosine similarity at which a pair is predicted to match.
pub const MATCH_THRESHOLD: f64 = 1.0 - CONTRASTIVE_MARGIN / 2.0;
const MATCH_SHARPNESS: f64 = 20.0;

/// Keys that shape the network; a continued fit cannot change them.
const ARCHITECTURE_KEYS: [&str; 7] = [
    "backbone_dim",
    "backbone_depth",
    "fusion_dim",
    "max_text_len",
    "image_size",
    "pooling_mode",
    "lora",
];

#[derive(Clone, Default)]
pub struct FitOptions {
    pub preset: Option<Quality>,
    pub time_limit: Option<Duration>,
    /// Flat dotted keys of [`PresetConfig`].
    pub overrides: BTreeMap<String, serde_json::Value>,
    pub hpo: Option<RandomSearchSpec>,
    pub seed: u64,
    /// Validation table; when absent a stratified holdout is split off.
    pub tuning_data: Option<MultimodalTable>,
    pub holdout_fraction: Option<f64>,
    /// Writes a resumable snapshot here at every validation boundary and
    /// the final artifact when training ends.
    pub save_path: Option<PathBuf>,
    /// Stops after this many updates as if the process were killed.
    pub interrupt_after: Option<u64>,
}

impl FitOptions {
    pub fn with_override(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.overrides.insert(key.to_string(), value.into());
        self
    }

    fn quality(&self) -> Quality {
        self.preset.unwrap_or(Quality::HighQuality)
    }

    fn holdout(&self) -> f64 {
        self.holdout_fraction.unwrap_or(DEFAULT_HOLDOUT)
    }
}

/// Column roles of a matching problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingSpec {
    pub problem_type: ProblemType,
    pub query_column: String,
    pub response_column: String,
    /// Binary match label; required for TTM and IIM.
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Supervised {
        label: String,
        problem_type: Option<ProblemType>,
    },
    Matching(MatchingSpec),
}

/// Which column plays the query role in a retrieval evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RetrievalDirection {
    /// Query column retrieves response items (ITM).
    #[default]
    QueryToResponse,
    /// Response column retrieves query items (TIM).
    ResponseToQuery,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub metric: Option<MetricSpec>,
    pub direction: RetrievalDirection,
}

/// Fitted preprocessing: one state, or one per tower.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Pipelines {
    pub main: PipelineState,
    pub response: Option<PipelineState>,
}

impl Pipelines {
    fn response(&self) -> &PipelineState {
        self.response.as_ref().unwrap_or(&self.main)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Network {
    Fusion(FusionModel),
    BiEncoder(BiEncoderModel),
}

impl Network {
    pub fn params(&self) -> &ParamStore {
        match self {
            Network::Fusion(m) => &m.params,
            Network::BiEncoder(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Network::Fusion(m) => &mut m.params,
            Network::BiEncoder(m) => &mut m.params,
        }
    }
}

/// Everything a trained predictor carries.
#[derive(Debug, Clone)]
pub(crate) struct Trained {
    pub schema: TableSchema,
    pub problem_type: ProblemType,
    pub metric: MetricName,
    pub quality: Quality,
    pub preset: PresetConfig,
    pub overrides: BTreeMap<String, serde_json::Value>,
    pub pipelines: Pipelines,
    pub network: Network,
    pub history: Vec<HistoryRecord>,
    pub status: TrainStatus,
    pub soup_members: Vec<u64>,
    pub checkpoints: Vec<CheckpointRecord>,
}

impl Trained {
    fn last_step(&self) -> u64 {
        self.history.last().map_or(0, |r| r.step)
    }
}

/// Builds the network a fitted pipeline and preset describe.
pub(crate) fn build_network(
    task: &TaskSpec,
    pipelines: &Pipelines,
    preset: &PresetConfig,
) -> Result<Network> {
    let mut net = match task {
        TaskSpec::Supervised { .. } => {
            Network::Fusion(build_fusion_model(&pipelines.main, preset, preset.seed)?)
        }
        TaskSpec::Matching(spec) => Network::BiEncoder(build_biencoder(
            &pipelines.main,
            pipelines.response.as_ref(),
            preset,
            spec.label.is_none(),
            preset.seed,
        )?),
    };
    if let Some(lora) = &preset.lora {
        match &mut net {
            Network::Fusion(m) => inject_lora(m, lora)?,
            Network::BiEncoder(m) => inject_lora(m, lora)?,
        }
    }
    Ok(net)
}

pub struct Predictor {
    task: TaskSpec,
    trained: Option<Trained>,
    /// Unfinished run to continue on the next `fit`.
    pending: Option<TrainState>,
}

/// Train and validation tables of one fit.
struct Split {
    train: MultimodalTable,
    val: MultimodalTable,
}

impl Predictor {
    /// Predictor for classification or regression on `label`; the problem
    /// type is inferred at fit time.
    pub fn new(label: impl Into<String>) -> Self {
        Predictor {
            task: TaskSpec::Supervised {
                label: label.into(),
                problem_type: None,
            },
            trained: None,
            pending: None,
        }
    }

    /// Fixes the problem type instead of inferring it.
    pub fn with_problem_type(mut self, problem: ProblemType) -> Self {
        if let TaskSpec::Supervised { problem_type, .. } = &mut self.task {
            *problem_type = Some(problem);
        }
        self
    }

    pub fn matching(spec: MatchingSpec) -> Self {
        Predictor {
            task: TaskSpec::Matching(spec),
            trained: None,
            pending: None,
        }
    }

    /// Builds and fits a matching predictor in one call.
    pub fn fit_matching(
        pairs: &MultimodalTable,
        spec: MatchingSpec,
        options: &FitOptions,
    ) -> Result<Predictor> {
        let mut p = Predictor::matching(spec);
        p.fit(pairs, options)?;
        Ok(p)
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn is_trained(&self) -> bool {
        self.trained.is_some()
    }

    pub fn problem_type(&self) -> Option<ProblemType> {
        self.trained.as_ref().map(|t| t.problem_type)
    }

    /// Default evaluation metric of the fitted problem.
    pub fn metric(&self) -> Option<MetricName> {
        self.trained.as_ref().map(|t| t.metric)
    }

    pub fn preset(&self) -> Option<&PresetConfig> {
        self.trained.as_ref().map(|t| &t.preset)
    }

    pub fn schema(&self) -> Option<&TableSchema> {
        self.trained.as_ref().map(|t| &t.schema)
    }

    pub fn history(&self) -> &[HistoryRecord] {
        self.trained.as_ref().map_or(&[], |t| &t.history)
    }

    pub fn status(&self) -> Option<TrainStatus> {
        self.trained.as_ref().map(|t| t.status)
    }

    /// Steps of the checkpoints averaged into the final weights.
    pub fn soup_members(&self) -> &[u64] {
        self.trained.as_ref().map_or(&[], |t| &t.soup_members)
    }

    /// Top-k checkpoints of the last run, best first.
    pub fn checkpoints(&self) -> &[CheckpointRecord] {
        self.trained.as_ref().map_or(&[], |t| &t.checkpoints)
    }

    /// Whether the next `fit` continues an unfinished run.
    pub fn has_pending_run(&self) -> bool {
        self.pending.is_some()
    }

    pub fn params(&self) -> Option<&ParamStore> {
        self.trained.as_ref().map(|t| t.network.params())
    }

    pub fn fusion_model(&self) -> Option<&FusionModel> {
        match self.trained.as_ref().map(|t| &t.network) {
            Some(Network::Fusion(m)) => Some(m),
            _ => None,
        }
    }

    pub fn biencoder(&self) -> Option<&BiEncoderModel> {
        match self.trained.as_ref().map(|t| &t.network) {
            Some(Network::BiEncoder(m)) => Some(m),
            _ => None,
        }
    }

    fn trained(&self) -> Result<&Trained> {
        self.trained.as_ref().ok_or(Error::NotTrained)
    }

    /// Trains on `data`. On an untrained predictor this infers the problem,
    /// builds the pipeline and model, and trains from scratch. On a trained
    /// one it continues from the current weights, or finishes an
    /// interrupted run.
    pub fn fit(&mut self, data: &MultimodalTable, options: &FitOptions) -> Result<&mut Self> {
        if let Some(spec) = &options.hpo {
            if self.trained.is_some() {
                return Err(Error::InvalidConfig(
                    "hyperparameter search needs an untrained predictor".into(),
                ));
            }
            let TaskSpec::Supervised { label, .. } = &self.task else {
                return Err(Error::InvalidConfig(
                    "hyperparameter search supports supervised problems only".into(),
                ));
            };
            let inner = FitOptions {
                hpo: None,
                ..options.clone()
            };
            let (best, _) = random_search(data, label, spec, &inner, options.seed)?;
            *self = best;
            return Ok(self);
        }
        match self.task.clone() {
            TaskSpec::Supervised {
                label,
                problem_type,
            } => self.fit_supervised(data, &label, problem_type, options)?,
            TaskSpec::Matching(spec) => self.fit_pairs(data, &spec, options)?,
        }
        Ok(self)
    }

    /// Preset for a fresh fit: the registry entry, the seed, then overrides.
    fn fresh_preset(problem: ProblemType, options: &FitOptions) -> Result<PresetConfig> {
        let mut base = PresetConfig::for_problem(problem, options.quality());
        base.seed = options.seed;
        base.with_overrides(options.overrides.iter().map(|(k, v)| (k.as_str(), v)))
    }

    /// Preset for continuing a trained predictor.
    fn continued_preset(t: &Trained, options: &FitOptions) -> Result<PresetConfig> {
        let next = t
            .preset
            .with_overrides(options.overrides.iter().map(|(k, v)| (k.as_str(), v)))?;
        let (old, new) = (
            serde_json::to_value(&t.preset)?,
            serde_json::to_value(&next)?,
        );
        if let Some(k) = ARCHITECTURE_KEYS.iter().find(|k| old[**k] != new[**k]) {
            return Err(Error::InvalidConfig(format!(
                "`{k}` changes the network and cannot be overridden on a trained predictor"
            )));
        }
        Ok(next)
    }

    fn split(
        data: &MultimodalTable,
        label: Option<&str>,
        problem: ProblemType,
        options: &FitOptions,
        seed: u64,
    ) -> Result<Split> {
        match &options.tuning_data {
            Some(val) => {
                let val = match label {
                    Some(l) if !problem.is_matching() => drop_null_labels(val, l)?.0,
                    _ => val.clone(),
                };
                Ok(Split {
                    train: data.clone(),
                    val,
                })
            }
            None => {
                let (train, val) = split_train_val(data, label, options.holdout(), problem, seed)?;
                Ok(Split { train, val })
            }
        }
    }

    fn fit_supervised(
        &mut self,
        data: &MultimodalTable,
        label: &str,
        forced: Option<ProblemType>,
        options: &FitOptions,
    ) -> Result<()> {
        if data.column(label).is_none() {
            return Err(Error::MissingLabelColumn(label.to_string()));
        }
        let (data, _) = drop_null_labels(data, label)?;
        if data.n_rows() < MIN_TRAIN_ROWS {
            return Err(Error::TooFewRows(format!(
                "fit needs at least {MIN_TRAIN_ROWS} labeled rows, got {}",
                data.n_rows()
            )));
        }
        let thresholds = DetectionThresholds::default();
        let resuming = self.pending.take();
        let mut trained = match self.trained.take() {
            Some(mut t) => {
                if resuming.is_none() {
                    t.preset = Self::continued_preset(&t, options)?;
                }
                t
            }
            None => {
                let problem = match forced {
                    Some(p) => p,
                    None => infer_problem_type(
                        &data.column(label).expect("checked above").values,
                        &thresholds,
                    )
                    .context("inferring the problem type")?,
                };
                let preset = Self::fresh_preset(problem, options)?;
                let split = Self::split(&data, Some(label), problem, options, preset.seed)?;
                let schema = TableSchema::infer(&split.train, Some(label), problem, &thresholds)?;
                let main =
                    fit_pipeline(&split.train, &schema, &preset).context("fitting the pipeline")?;
                let pipelines = Pipelines {
                    main,
                    response: None,
                };
                let network = build_network(&self.task, &pipelines, &preset)?;
                log::info!(
                    "problem type {problem}; {} feature columns kept, {} dropped",
                    pipelines.main.kept_columns.len(),
                    pipelines.main.dropped_columns.len()
                );
                Trained {
                    schema,
                    problem_type: problem,
                    metric: MetricName::default_for(problem),
                    quality: options.quality(),
                    preset,
                    overrides: options.overrides.clone(),
                    pipelines,
                    network,
                    history: Vec::new(),
                    status: TrainStatus::Running,
                    soup_members: Vec::new(),
                    checkpoints: Vec::new(),
                }
            }
        };
        let split = Self::split(
            &data,
            Some(label),
            trained.problem_type,
            options,
            trained.preset.seed,
        )?;
        let result = run_training(&self.task, &mut trained, &split, resuming, options);
        self.finish(trained, result)
    }

    fn fit_pairs(
        &mut self,
        data: &MultimodalTable,
        spec: &MatchingSpec,
        options: &FitOptions,
    ) -> Result<()> {
        if !spec.problem_type.is_matching() {
            return Err(Error::InvalidConfig(format!(
                "{} is not a matching problem",
                spec.problem_type
            )));
        }
        for c in [&spec.query_column, &spec.response_column] {
            if data.column(c).is_none() {
                return Err(Error::SchemaMismatch(format!("missing item column `{c}`")));
            }
        }
        let data = match &spec.label {
            Some(l) => {
                if data.column(l).is_none() {
                    return Err(Error::MissingLabel(spec.problem_type.to_string()));
                }
                let (d, _) = drop_null_labels(data, l)?;
                if spec.problem_type == ProblemType::Itm {
                    let keep: Vec<usize> = (0..d.n_rows())
                        .filter(|&i| d.cell(l, i).and_then(tasks::match_label) == Some(true))
                        .collect();
                    d.select_rows(&keep)
                } else {
                    d
                }
            }
            None if spec.problem_type != ProblemType::Itm => {
                return Err(Error::MissingLabel(spec.problem_type.to_string()));
            }
            None => data.clone(),
        };
        if data.n_rows() < MIN_TRAIN_ROWS {
            return Err(Error::TooFewRows(format!(
                "fit_matching needs at least {MIN_TRAIN_ROWS} pairs, got {}",
                data.n_rows()
            )));
        }
        // Labeled pairs train with a contrastive objective; ITM with
        // in-batch negatives, for which the label only filters positives.
        let labeled = spec.problem_type != ProblemType::Itm;
        let task = TaskSpec::Matching(MatchingSpec {
            label: if labeled { spec.label.clone() } else { None },
            ..spec.clone()
        });
        let stratify = if labeled {
            ProblemType::Binary
        } else {
            spec.problem_type
        };
        let resuming = self.pending.take();
        let mut trained = match self.trained.take() {
            Some(mut t) => {
                if resuming.is_none() {
                    t.preset = Self::continued_preset(&t, options)?;
                }
                t
            }
            None => {
                let thresholds = DetectionThresholds::default();
                let preset = Self::fresh_preset(spec.problem_type, options)?;
                let split = Self::split(&data, task_label(&task), stratify, options, preset.seed)?;
                let mut schema_cols = Vec::new();
                let mut states = Vec::new();
                for col in [&spec.query_column, &spec.response_column] {
                    let values = &split.train.column(col).expect("checked above").values;
                    let modality = infer_column_modality(values, &thresholds)
                        .map_err(|_| Error::EmptyColumn(col.clone()))?;
                    schema_cols.push(ColumnSchema {
                        name: col.clone(),
                        modality,
                    });
                    states.push(modality);
                }
                let shared = states[0].group() == states[1].group();
                let item_schema = |modality| TableSchema {
                    columns: vec![ColumnSchema {
                        name: tasks::ITEM_COLUMN.to_string(),
                        modality,
                    }],
                    label_column: None,
                    problem_type: spec.problem_type,
                };
                let q_items = tasks::item_table(&split.train, &spec.query_column)?;
                let r_items = tasks::item_table(&split.train, &spec.response_column)?;
                let pipelines = if shared {
                    let both = q_items.concat(&r_items)?;
                    Pipelines {
                        main: fit_pipeline(&both, &item_schema(states[0]), &preset)?,
                        response: None,
                    }
                } else {
                    Pipelines {
                        main: fit_pipeline(&q_items, &item_schema(states[0]), &preset)?,
                        response: Some(fit_pipeline(&r_items, &item_schema(states[1]), &preset)?),
                    }
                };
                let network = build_network(&task, &pipelines, &preset)?;
                if let Some(l) = &spec.label {
                    schema_cols.retain(|c| &c.name != l);
                }
                Trained {
                    schema: TableSchema {
                        columns: schema_cols,
                        label_column: task_label(&task).map(str::to_string),
                        problem_type: spec.problem_type,
                    },
                    problem_type: spec.problem_type,
                    metric: MetricName::default_for(spec.problem_type),
                    quality: options.quality(),
                    preset,
                    overrides: options.overrides.clone(),
                    pipelines,
                    network,
                    history: Vec::new(),
                    status: TrainStatus::Running,
                    soup_members: Vec::new(),
                    checkpoints: Vec::new(),
                }
            }
        };
        self.task = task;
        let split = Self::split(
            &data,
            task_label(&self.task),
            stratify,
            options,
            trained.preset.seed,
        )?;
        let result = run_training(&self.task, &mut trained, &split, resuming, options);
        self.finish(trained, result)
    }

    /// Stores the outcome of a run; an interrupted run stays pending.
    fn finish(&mut self, trained: Trained, result: Result<Option<TrainState>>) -> Result<()> {
        let had_progress = !trained.history.is_empty();
        match result {
            Ok(pending) => {
                self.pending = pending;
                self.trained = Some(trained);
                Ok(())
            }
            Err(e) => {
                if had_progress {
                    self.trained = Some(trained);
                }
                Err(e)
            }
        }
    }

    /// Inference-time copy of `data` with the label column removed.
    fn features(&self, data: &MultimodalTable) -> MultimodalTable {
        match task_label(&self.task) {
            Some(l) if data.column(l).is_some() => data.without_column(l),
            _ => data.clone(),
        }
    }

    fn fusion_batches(&self, t: &Trained, data: &MultimodalTable) -> Result<Vec<Batch>> {
        let data = self.features(data);
        t.pipelines.main.check_columns(&data)?;
        tasks::inference_batches(&t.pipelines.main, &data, t.preset.batch_size)
    }

    /// Head outputs and fused embeddings through the batch pipeline.
    fn fusion_outputs(&self, data: &MultimodalTable) -> Result<(Tensor, Tensor)> {
        let t = self.trained()?;
        let Network::Fusion(model) = &t.network else {
            return Err(Error::InvalidConfig("not a fusion predictor".into()));
        };
        let batches = self.fusion_batches(t, data)?;
        tasks::fusion_outputs(model, &batches)
    }

    fn side_embeddings(&self, data: &MultimodalTable, side: Side) -> Result<Tensor> {
        let t = self.trained()?;
        let (Network::BiEncoder(model), TaskSpec::Matching(spec)) = (&t.network, &self.task) else {
            return Err(Error::InvalidConfig("not a matching predictor".into()));
        };
        let (col, state) = match side {
            Side::Query => (&spec.query_column, &t.pipelines.main),
            Side::Response => (&spec.response_column, t.pipelines.response()),
        };
        let items = tasks::item_table(data, col)?;
        let batches = tasks::inference_batches(state, &items, t.preset.batch_size)?;
        tasks::embed_batches(model, side, &batches)
    }

    fn pair_similarity(&self, data: &MultimodalTable) -> Result<Vec<f64>> {
        let q = self.side_embeddings(data, Side::Query)?;
        let r = self.side_embeddings(data, Side::Response)?;
        Ok((0..q.rows_cols().0)
            .map(|i| q.row(i).iter().zip(r.row(i)).map(|(a, b)| a * b).sum())
            .collect())
    }

    fn decode(&self, t: &Trained, logits: &Tensor) -> Vec<Cell> {
        let (n, _) = logits.rows_cols();
        match &t.pipelines.main.label_codec {
            Some(codec @ LabelCodec::Classes { .. }) => (0..n)
                .map(|i| codec.decode_class(tasks::argmax(logits.row(i))))
                .collect(),
            Some(codec @ LabelCodec::Regression { .. }) => (0..n)
                .map(|i| Cell::Number(codec.decode_value(logits.row(i)[0])))
                .collect(),
            None => (0..n).map(|i| Cell::Number(logits.row(i)[0])).collect(),
        }
    }

    /// Predicted labels (or values for regression; 1/0 match decisions for
    /// matching).
    pub fn predict(&self, data: &MultimodalTable) -> Result<Vec<Cell>> {
        let t = self.trained()?;
        match &t.network {
            Network::Fusion(_) => {
                let (logits, _) = self.fusion_outputs(data)?;
                Ok(self.decode(t, &logits))
            }
            Network::BiEncoder(_) => Ok(self
                .pair_similarity(data)?
                .into_iter()
                .map(|c| Cell::Number(if c >= MATCH_THRESHOLD { 1.0 } else { 0.0 }))
                .collect()),
        }
    }

    /// Class probability rows, ordered as the label codec's classes. For
    /// matching, `[p(no match), p(match)]`.
    pub fn predict_proba(&self, data: &MultimodalTable) -> Result<Vec<Vec<f64>>> {
        let t = self.trained()?;
        if t.problem_type == ProblemType::Regression {
            return Err(Error::ProbaOnRegression);
        }
        match &t.network {
            Network::Fusion(_) => {
                let (logits, _) = self.fusion_outputs(data)?;
                Ok(tasks::softmax_rows(&logits))
            }
            Network::BiEncoder(_) => Ok(self
                .pair_similarity(data)?
                .into_iter()
                .map(|c| {
                    let p = 1.0 / (1.0 + (-(c - MATCH_THRESHOLD) * MATCH_SHARPNESS).exp());
                    vec![1.0 - p, p]
                })
                .collect()),
        }
    }

    /// Class names in probability-column order.
    pub fn class_labels(&self) -> Option<Vec<Cell>> {
        match self.trained.as_ref()?.pipelines.main.label_codec.as_ref()? {
            LabelCodec::Classes { classes } => Some(classes.clone()),
            LabelCodec::Regression { .. } => None,
        }
    }

    /// Fused pre-head embeddings `[n, fusion_dim]`. For matching predictors,
    /// the query column's item embeddings, or the response column's when the
    /// query column is absent.
    pub fn extract_embedding(&self, data: &MultimodalTable) -> Result<Tensor> {
        let t = self.trained()?;
        match (&t.network, &self.task) {
            (Network::Fusion(_), _) => Ok(self.fusion_outputs(data)?.1),
            (Network::BiEncoder(_), TaskSpec::Matching(spec)) => {
                let side = if data.column(&spec.query_column).is_some() {
                    Side::Query
                } else {
                    Side::Response
                };
                self.side_embeddings(data, side)
            }
            _ => Err(Error::NotTrained),
        }
    }

    /// Item embeddings of one side of a matching predictor.
    pub fn extract_item_embedding(&self, data: &MultimodalTable, side: Side) -> Result<Tensor> {
        self.side_embeddings(data, side)
    }

    /// Low-latency prediction for at most [`REALTIME_MAX_ROWS`] rows: the
    /// rows are processed in order on the calling thread and collated once.
    /// Results equal [`Predictor::predict`].
    pub fn predict_realtime(&self, rows: &MultimodalTable) -> Result<Vec<Cell>> {
        if rows.n_rows() > REALTIME_MAX_ROWS {
            return Err(Error::InvalidTable(format!(
                "predict_realtime takes at most {REALTIME_MAX_ROWS} rows, got {}",
                rows.n_rows()
            )));
        }
        if rows.n_rows() == 0 {
            return Ok(Vec::new());
        }
        crate::tensor::serial_kernels(|| self.realtime_inner(rows))
    }

    fn realtime_inner(&self, rows: &MultimodalTable) -> Result<Vec<Cell>> {
        let t = self.trained()?;
        match (&t.network, &self.task) {
            (Network::Fusion(model), _) => {
                let data = self.features(rows);
                t.pipelines.main.check_columns(&data)?;
                let idx: Vec<usize> = (0..data.n_rows()).collect();
                let samples = tasks::transform_sequential(&t.pipelines.main, &data, &idx)?;
                let batch = crate::pipeline::collate(&samples)?;
                let out = model.forward(&batch)?;
                Ok(self.decode(t, &out.logits))
            }
            (Network::BiEncoder(model), TaskSpec::Matching(spec)) => {
                let idx: Vec<usize> = (0..rows.n_rows()).collect();
                let embed = |col: &str, state: &PipelineState, side| -> Result<Tensor> {
                    let items = tasks::item_table(rows, col)?;
                    let batch = crate::pipeline::collate(&tasks::transform_sequential(
                        state, &items, &idx,
                    )?)?;
                    model.embed(side, &batch)
                };
                let q = embed(&spec.query_column, &t.pipelines.main, Side::Query)?;
                let r = embed(
                    &spec.response_column,
                    t.pipelines.response(),
                    Side::Response,
                )?;
                Ok(idx
                    .iter()
                    .map(|&i| {
                        let c: f64 = q.row(i).iter().zip(r.row(i)).map(|(a, b)| a * b).sum();
                        Cell::Number(if c >= MATCH_THRESHOLD { 1.0 } else { 0.0 })
                    })
                    .collect())
            }
            _ => Err(Error::NotTrained),
        }
    }

    /// Scores `data` with the default metric of the problem.
    pub fn evaluate(&self, data: &MultimodalTable) -> Result<ScoreReport> {
        self.evaluate_with(data, &EvalOptions::default())
    }

    pub fn evaluate_with(
        &self,
        data: &MultimodalTable,
        options: &EvalOptions,
    ) -> Result<ScoreReport> {
        let t = self.trained()?;
        let spec = options
            .metric
            .clone()
            .unwrap_or_else(|| MetricSpec::new(t.metric));
        let mut report = ScoreReport::new();
        match &self.task {
            TaskSpec::Supervised { label, .. } => {
                if data.column(label).is_none() {
                    return Err(Error::MissingLabelColumn(label.clone()));
                }
                let (data, _) = drop_null_labels(data, label)?;
                let truth = &data.column(label).expect("checked above").values;
                let (logits, _) = self.fusion_outputs(&data)?;
                let score = self.supervised_metric(t, spec.name, truth, &logits)?;
                report.insert(spec.name.to_string(), score);
            }
            TaskSpec::Matching(m) => {
                let score = match spec.name {
                    MetricName::RocAuc => {
                        let label = m.label.as_ref().ok_or_else(|| {
                            Error::InvalidMetricInput(
                                "ROC-AUC needs a labeled matching problem".into(),
                            )
                        })?;
                        let col = data
                            .column(label)
                            .ok_or_else(|| Error::MissingLabelColumn(label.clone()))?;
                        let keep: Vec<usize> = (0..data.n_rows())
                            .filter(|&i| !col.values[i].is_null())
                            .collect();
                        let data = data.select_rows(&keep);
                        let y: Vec<bool> = data
                            .column(label)
                            .expect("kept")
                            .values
                            .iter()
                            .map(|c| tasks::match_label(c).unwrap_or(false))
                            .collect();
                        metrics::roc_auc(&y, &self.pair_similarity(&data)?)?
                    }
                    MetricName::RecallAtKMean => {
                        let data = match &m.label {
                            Some(l) if data.column(l).is_some() => {
                                let keep: Vec<usize> = (0..data.n_rows())
                                    .filter(|&i| {
                                        data.cell(l, i).and_then(tasks::match_label) == Some(true)
                                    })
                                    .collect();
                                data.select_rows(&keep)
                            }
                            _ => data.clone(),
                        };
                        let (q_side, g_side, g_col) = match options.direction {
                            RetrievalDirection::QueryToResponse => {
                                (Side::Query, Side::Response, &m.response_column)
                            }
                            RetrievalDirection::ResponseToQuery => {
                                (Side::Response, Side::Query, &m.query_column)
                            }
                        };
                        let set = tasks::retrieval_set(
                            &data
                                .column(g_col)
                                .ok_or_else(|| {
                                    Error::SchemaMismatch(format!("missing item column `{g_col}`"))
                                })?
                                .values,
                        );
                        let queries = self.side_embeddings(&data, q_side)?;
                        let gallery = self.side_embeddings(&data, g_side)?;
                        let q: Vec<Vec<f64>> = (0..queries.rows_cols().0)
                            .map(|i| queries.row(i).to_vec())
                            .collect();
                        let g: Vec<Vec<f64>> = set
                            .gallery_rows
                            .iter()
                            .map(|&i| gallery.row(i).to_vec())
                            .collect();
                        let per_k =
                            metrics::recall_at_k(&q, &g, &set.ground_truth, &spec.k_values)?;
                        for (k, r) in spec.k_values.iter().zip(&per_k) {
                            report.insert(format!("recall@{k}"), *r);
                        }
                        per_k.iter().sum::<f64>() / per_k.len().max(1) as f64
                    }
                    other => {
                        return Err(Error::InvalidMetricInput(format!(
                            "metric {other} does not apply to {}",
                            t.problem_type
                        )))
                    }
                };
                report.insert(spec.name.to_string(), score);
            }
        }
        Ok(report)
    }

    fn supervised_metric(
        &self,
        t: &Trained,
        metric: MetricName,
        truth: &[Cell],
        logits: &Tensor,
    ) -> Result<f64> {
        let codec = t
            .pipelines
            .main
            .label_codec
            .as_ref()
            .ok_or(Error::NotTrained)?;
        let bad = || {
            Err(Error::InvalidMetricInput(format!(
                "metric {metric} does not apply to {}",
                t.problem_type
            )))
        };
        match (metric, codec) {
            (MetricName::R2, LabelCodec::Regression { .. }) => {
                let y: Vec<f64> = truth
                    .iter()
                    .map(|c| {
                        c.as_number().ok_or_else(|| {
                            Error::InvalidMetricInput(format!("non-numeric target `{c}`"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let yhat: Vec<f64> = (0..y.len())
                    .map(|i| codec.decode_value(logits.row(i)[0]))
                    .collect();
                metrics::r2(&y, &yhat)
            }
            (
                MetricName::F1 | MetricName::F1Weighted | MetricName::RocAuc,
                LabelCodec::Classes { classes },
            ) => {
                let y: Vec<String> = truth.iter().map(|c| c.key().unwrap_or_default()).collect();
                let yhat: Vec<String> = self
                    .decode(t, logits)
                    .iter()
                    .map(|c| c.key().unwrap_or_default())
                    .collect();
                match metric {
                    MetricName::F1Weighted => metrics::f1_weighted(&y, &yhat),
                    _ if classes.len() != 2 => bad(),
                    MetricName::F1 => {
                        let pos = classes[1].key().unwrap_or_default();
                        metrics::f1_binary(&y, &yhat, &pos)
                    }
                    _ => {
                        let pos = classes[1].key().unwrap_or_default();
                        let truth: Vec<bool> = y.iter().map(|k| *k == pos).collect();
                        let scores: Vec<f64> =
                            tasks::softmax_rows(logits).iter().map(|p| p[1]).collect();
                        metrics::roc_auc(&truth, &scores)
                    }
                }
            }
            _ => bad(),
        }
    }

    /// Writes the artifact directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let t = self.trained()?;
        artifact::write(path.as_ref(), &self.task, t, self.pending.as_ref())
    }

    /// Reads an artifact. With `resume`, an unfinished run stored in it is
    /// continued by the next `fit` on the same data.
    pub fn load(path: impl AsRef<Path>, resume: bool) -> Result<Predictor> {
        let (task, trained, pending) = artifact::read(path.as_ref(), resume)?;
        Ok(Predictor {
            task,
            trained: Some(trained),
            pending,
        })
    }
}

fn task_label(task: &TaskSpec) -> Option<&str> {
    match task {
        TaskSpec::Supervised { label, .. } => Some(label),
        TaskSpec::Matching(m) => m.label.as_deref(),
    }
}

/// Trains `trained` on `split`, continuing `resuming` if given. Returns the
/// train state when the run was interrupted.
fn run_training(
    task_spec: &TaskSpec,
    trained: &mut Trained,
    split: &Split,
    resuming: Option<TrainState>,
    options: &FitOptions,
) -> Result<Option<TrainState>> {
    let cfg = trained.preset.clone();
    let n_params = trained.network.params().len();
    let spe = steps_per_epoch(split.train.n_rows(), cfg.batch_size);
    let state = match resuming {
        Some(s) => {
            if s.steps_per_epoch != spe {
                return Err(Error::SchemaMismatch(
                    "resume data does not match the interrupted run's training set".into(),
                ));
            }
            s
        }
        None => TrainState::new(n_params, trained.last_step(), spe, cfg.max_epochs),
    };
    let prior_history: Vec<HistoryRecord> = if state.run_step > 0 {
        // The run's own history continues; earlier fits stay in front of it.
        let first = state.step_offset;
        trained
            .history
            .iter()
            .filter(|r| r.step <= first)
            .cloned()
            .collect()
    } else {
        trained.history.clone()
    };
    let template = artifact::Metadata::of(task_spec, trained);
    let Trained {
        network,
        pipelines,
        problem_type,
        ..
    } = trained;
    let snapshot = options.save_path.clone();
    let mut hook = |s: &TrainState, params: &ParamStore| -> Result<()> {
        if let Some(dir) = &snapshot {
            let mut history = prior_history.clone();
            history.extend(s.history.iter().cloned());
            artifact::write_snapshot(dir, &template, pipelines, params, &history, s)?;
        }
        Ok(())
    };
    let opts = TrainOptions {
        time_limit: options.time_limit,
        interrupt_after: options.interrupt_after,
        on_boundary: Some(&mut hook),
    };
    let result = match network {
        Network::Fusion(model) => {
            let mut task = SupervisedTask::new(
                model,
                &pipelines.main,
                &split.train,
                &split.val,
                *problem_type,
                cfg.seed,
                cfg.batch_size,
            )?;
            train(&mut task, &cfg, state, opts)
        }
        Network::BiEncoder(model) => {
            let TaskSpec::Matching(spec) = task_spec else {
                return Err(Error::InvalidConfig(
                    "bi-encoder without a matching task".into(),
                ));
            };
            let mut task = matching_task(model, pipelines, spec, split, cfg.seed, cfg.batch_size)?;
            train(&mut task, &cfg, state, opts)
        }
    };
    let state = result?;
    let mut history = prior_history;
    history.extend(state.history.iter().cloned());
    trained.history = history;
    trained.status = state.status;
    trained.checkpoints = state.checkpoints.clone();
    trained.soup_members = state.soup_members.clone();
    if state.status == TrainStatus::Interrupted {
        return Ok(Some(state));
    }
    if let Some(dir) = &options.save_path {
        artifact::write(dir, task_spec, trained, None)?;
    }
    Ok(None)
}

fn matching_task<'a>(
    model: &'a mut BiEncoderModel,
    pipelines: &'a Pipelines,
    spec: &MatchingSpec,
    split: &Split,
    seed: u64,
    batch_size: usize,
) -> Result<MatchingTask<'a>> {
    let query = tasks::item_table(&split.train, &spec.query_column)?;
    let response = tasks::item_table(&split.train, &spec.response_column)?;
    let labels = |t: &MultimodalTable| -> Option<Vec<bool>> {
        let l = spec.label.as_ref()?;
        Some(
            t.column(l)?
                .values
                .iter()
                .map(|c| tasks::match_label(c).unwrap_or(false))
                .collect(),
        )
    };
    let vq = tasks::item_table(&split.val, &spec.query_column)?;
    let vr = tasks::item_table(&split.val, &spec.response_column)?;
    let val_labels = labels(&split.val);
    let val_set = val_labels.is_none().then(|| {
        tasks::retrieval_set(
            &split
                .val
                .column(&spec.response_column)
                .expect("item column")
                .values,
        )
    });
    Ok(MatchingTask {
        labels: labels(&split.train),
        val_query: tasks::inference_batches(&pipelines.main, &vq, batch_size)?,
        val_response: tasks::inference_batches(pipelines.response(), &vr, batch_size)?,
        val_labels,
        val_set,
        model,
        query_state: &pipelines.main,
        response_state: pipelines.response(),
        query,
        response,
        seed,
    })
}
