//! Training tasks that connect the pipeline and the networks to the trainer.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{self, DEFAULT_K_VALUES};
use crate::models::biencoder::in_batch_loss;
use crate::models::{BiEncoderModel, FusionModel, Graph, ParamGrads, ParamStore, Side};
use crate::pipeline::{collate, sample_rng, Batch, Label, Labels, PipelineState, ProcessedSample};
use crate::table::{Cell, Column, MultimodalTable, ProblemType};
use crate::tensor::Tensor;
use crate::trainer::TrainingTask;

/// Margin of the contrastive objective for labeled pairs.
pub const CONTRASTIVE_MARGIN: f64 = 0.3;

/// Column name of the single-column tables fed to a bi-encoder tower.
pub(crate) const ITEM_COLUMN: &str = "item";

/// Augmentation stream for a training view.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub seed: u64,
    pub epoch: u64,
}

fn transform_one(
    state: &PipelineState,
    table: &MultimodalTable,
    row: usize,
    view: Option<View>,
) -> Result<ProcessedSample> {
    let (seed, epoch) = view.map_or((0, 0), |v| (v.seed, v.epoch));
    let mut rng = sample_rng(seed, epoch, row as u64);
    state.transform_sample(table, row, view.is_some(), &mut rng)
}

/// Transforms rows on the worker pool, keeping order.
pub(crate) fn transform_parallel(
    state: &PipelineState,
    table: &MultimodalTable,
    rows: &[usize],
    view: Option<View>,
) -> Vec<Result<ProcessedSample>> {
    rows.par_iter()
        .map(|&r| transform_one(state, table, r, view))
        .collect()
}

pub(crate) fn transform_sequential(
    state: &PipelineState,
    table: &MultimodalTable,
    rows: &[usize],
) -> Result<Vec<ProcessedSample>> {
    rows.iter()
        .map(|&r| transform_one(state, table, r, None))
        .collect()
}

/// Training keeps going past undecodable images; anything else is fatal.
fn skip_bad_images(results: Vec<Result<ProcessedSample>>) -> Result<Vec<Option<ProcessedSample>>> {
    results
        .into_iter()
        .map(|r| match r {
            Ok(s) => Ok(Some(s)),
            Err(e @ Error::ImageDecode { .. }) => {
                log::warn!("skipping sample: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// Preprocessed inference batches of `table`, in row order.
pub(crate) fn inference_batches(
    state: &PipelineState,
    table: &MultimodalTable,
    batch_size: usize,
) -> Result<Vec<Batch>> {
    let rows: Vec<usize> = (0..table.n_rows()).collect();
    let samples = transform_parallel(state, table, &rows, None)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    samples.chunks(batch_size.max(1)).map(collate).collect()
}

/// Single-column copy of `column`, renamed for a tower's pipeline.
pub(crate) fn item_table(data: &MultimodalTable, column: &str) -> Result<MultimodalTable> {
    let col = data
        .column(column)
        .ok_or_else(|| Error::SchemaMismatch(format!("missing item column `{column}`")))?;
    let mut t = MultimodalTable::new(vec![Column::new(ITEM_COLUMN, col.values.clone())])?;
    if let Some(root) = data.image_root() {
        t = t.with_image_root(root);
    }
    Ok(t)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub(crate) fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = logits.rows_cols();
    (0..n)
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Validation score of head outputs against encoded labels under the
/// problem's default metric.
pub(crate) fn supervised_score(
    problem: ProblemType,
    logits: &Tensor,
    labels: &Labels,
) -> Result<f64> {
    match labels {
        Labels::Classes(y) => {
            let (n, _) = logits.rows_cols();
            let yhat: Vec<usize> = (0..n).map(|i| argmax(logits.row(i))).collect();
            if problem == ProblemType::Binary {
                metrics::f1_binary(y, &yhat, &1)
            } else {
                metrics::f1_weighted(y, &yhat)
            }
        }
        Labels::Values(y) => match metrics::r2(y, logits.data()) {
            Err(Error::ConstantTarget) => {
                let mse = y
                    .iter()
                    .zip(logits.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / y.len() as f64;
                Ok(-mse)
            }
            other => other,
        },
    }
}

fn concat_rows(parts: Vec<Tensor>) -> Tensor {
    let width = parts[0].shape()[1];
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    let n = data.len() / width.max(1);
    Tensor::new(vec![n, width], data)
}

/// Head outputs and embeddings of a fusion model over several batches.
pub(crate) fn fusion_outputs(model: &FusionModel, batches: &[Batch]) -> Result<(Tensor, Tensor)> {
    let mut logits = Vec::with_capacity(batches.len());
    let mut emb = Vec::with_capacity(batches.len());
    for b in batches {
        let out = model.forward(b)?;
        logits.push(out.logits);
        emb.push(out.embedding);
    }
    if logits.is_empty() {
        return Ok((
            Tensor::zeros(&[0, model.output_width]),
            Tensor::zeros(&[0, model.fusion_dim]),
        ));
    }
    Ok((concat_rows(logits), concat_rows(emb)))
}

pub(crate) fn embed_batches(
    model: &BiEncoderModel,
    side: Side,
    batches: &[Batch],
) -> Result<Tensor> {
    if batches.is_empty() {
        return Ok(Tensor::zeros(&[0, model.embed_dim]));
    }
    let parts = batches
        .iter()
        .map(|b| model.embed(side, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(concat_rows(parts))
}

pub(crate) struct SupervisedTask<'a> {
    pub model: &'a mut FusionModel,
    pub state: &'a PipelineState,
    pub train: &'a MultimodalTable,
    pub val: Vec<Batch>,
    pub val_labels: Labels,
    pub problem: ProblemType,
    pub seed: u64,
}

impl<'a> SupervisedTask<'a> {
    pub fn new(
        model: &'a mut FusionModel,
        state: &'a PipelineState,
        train: &'a MultimodalTable,
        val: &MultimodalTable,
        problem: ProblemType,
        seed: u64,
        batch_size: usize,
    ) -> Result<Self> {
        let rows: Vec<usize> = (0..val.n_rows()).collect();
        let samples: Vec<ProcessedSample> = transform_parallel(state, val, &rows, None)
            .into_iter()
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|s| s.label.is_some())
            .collect();
        if samples.len() < val.n_rows() {
            log::warn!(
                "{} validation rows carry labels unseen in training and are ignored",
                val.n_rows() - samples.len()
            );
        }
        let val_labels = labels_of(&samples).ok_or_else(|| {
            Error::InvalidTable("validation data has no usable labeled rows".into())
        })?;
        let batches = samples
            .chunks(batch_size.max(1))
            .map(collate)
            .collect::<Result<Vec<_>>>()?;
        Ok(SupervisedTask {
            model,
            state,
            train,
            val: batches,
            val_labels,
            problem,
            seed,
        })
    }
}

impl TrainingTask for SupervisedTask<'_> {
    fn n_train(&self) -> usize {
        self.train.n_rows()
    }

    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss_and_grads(&self, rows: &[usize], epoch: u64) -> Result<(f64, ParamGrads)> {
        let view = View {
            seed: self.seed,
            epoch,
        };
        let samples: Vec<ProcessedSample> =
            skip_bad_images(transform_parallel(self.state, self.train, rows, Some(view)))?
                .into_iter()
                .flatten()
                .filter(|s| s.label.is_some())
                .collect();
        if samples.is_empty() {
            return Err(Error::InvalidTable(
                "a training batch has no usable rows".into(),
            ));
        }
        let batch = collate(&samples)?;
        let mut g = Graph::new(&self.model.params, true);
        let (out, _) = self.model.forward_graph(&mut g, &batch)?;
        let loss = match &batch.labels {
            Some(Labels::Classes(c)) => g.tape.cross_entropy(out, c),
            Some(Labels::Values(v)) => g.tape.mse(out, v),
            None => unreachable!("unlabeled samples were filtered"),
        };
        Ok((g.tape.value(loss).item(), g.param_grads(loss)))
    }

    fn validate(&self) -> Result<f64> {
        let (logits, _) = fusion_outputs(self.model, &self.val)?;
        supervised_score(self.problem, &logits, &self.val_labels)
    }
}

/// Ground-truth layout of a retrieval evaluation: each query row's target
/// is its paired item; the gallery holds each distinct item once.
pub(crate) struct RetrievalSet {
    pub gallery_rows: Vec<usize>,
    pub ground_truth: Vec<usize>,
}

pub(crate) fn retrieval_set(items: &[Cell]) -> RetrievalSet {
    let mut gallery_rows = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let ground_truth = items
        .iter()
        .enumerate()
        .map(|(row, c)| {
            let key = c.key().unwrap_or_else(|| format!("null:{row}"));
            *index.entry(key).or_insert_with(|| {
                gallery_rows.push(row);
                gallery_rows.len() - 1
            })
        })
        .collect();
    RetrievalSet {
        gallery_rows,
        ground_truth,
    }
}

/// Recall@K averaged over the default K values that fit the gallery.
pub(crate) fn retrieval_score(
    queries: &Tensor,
    gallery: &Tensor,
    set: &RetrievalSet,
) -> Result<f64> {
    let rows = |t: &Tensor, idx: &mut dyn Iterator<Item = usize>| -> Vec<Vec<f64>> {
        idx.map(|i| t.row(i).to_vec()).collect()
    };
    let q = rows(queries, &mut (0..queries.rows_cols().0));
    let g = rows(gallery, &mut set.gallery_rows.iter().copied());
    let ks: Vec<usize> = DEFAULT_K_VALUES
        .iter()
        .copied()
        .filter(|&k| k <= g.len())
        .collect();
    let ks = if ks.is_empty() { vec![1] } else { ks };
    metrics::recall_at_k_mean(&q, &g, &set.ground_truth, &ks)
}

pub(crate) struct MatchingTask<'a> {
    pub model: &'a mut BiEncoderModel,
    pub query_state: &'a PipelineState,
    pub response_state: &'a PipelineState,
    pub query: MultimodalTable,
    pub response: MultimodalTable,
    /// Pair labels; `None` trains with in-batch negatives.
    pub labels: Option<Vec<bool>>,
    pub val_query: Vec<Batch>,
    pub val_response: Vec<Batch>,
    pub val_labels: Option<Vec<bool>>,
    pub val_set: Option<RetrievalSet>,
    pub seed: u64,
}

impl MatchingTask<'_> {
    fn side_samples(
        &self,
        rows: &[usize],
        view: View,
    ) -> Result<(Vec<ProcessedSample>, Vec<ProcessedSample>, Vec<usize>)> {
        let q = skip_bad_images(transform_parallel(
            self.query_state,
            &self.query,
            rows,
            Some(view),
        ))?;
        let r = skip_bad_images(transform_parallel(
            self.response_state,
            &self.response,
            rows,
            Some(view),
        ))?;
        let (mut qs, mut rs, mut kept) = (Vec::new(), Vec::new(), Vec::new());
        for ((a, b), &row) in q.into_iter().zip(r).zip(rows) {
            if let (Some(a), Some(b)) = (a, b) {
                qs.push(a);
                rs.push(b);
                kept.push(row);
            }
        }
        Ok((qs, rs, kept))
    }
}

impl TrainingTask for MatchingTask<'_> {
    fn n_train(&self) -> usize {
        self.query.n_rows()
    }

    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss_and_grads(&self, rows: &[usize], epoch: u64) -> Result<(f64, ParamGrads)> {
        let (qs, rs, kept) = self.side_samples(
            rows,
            View {
                seed: self.seed,
                epoch,
            },
        )?;
        if qs.is_empty() {
            return Err(Error::InvalidTable(
                "a training batch has no usable pairs".into(),
            ));
        }
        let (qb, rb) = (collate(&qs)?, collate(&rs)?);
        let mut g = Graph::new(&self.model.params, true);
        let loss = match (&self.labels, self.model.logit_scale) {
            (Some(labels), _) => {
                let y: Vec<bool> = kept.iter().map(|&r| labels[r]).collect();
                let cos = self.model.forward_graph(&mut g, &qb, &rb)?;
                g.tape.contrastive_loss(cos, &y, CONTRASTIVE_MARGIN)
            }
            (None, Some(scale)) => {
                let ea = self.model.embed_graph(&mut g, Side::Query, &qb)?;
                let eb = self.model.embed_graph(&mut g, Side::Response, &rb)?;
                let s = g.param(scale);
                in_batch_loss(&mut g, ea, eb, s)
            }
            (None, None) => {
                return Err(Error::InvalidConfig(
                    "in-batch training needs a logit scale".into(),
                ))
            }
        };
        Ok((g.tape.value(loss).item(), g.param_grads(loss)))
    }

    fn validate(&self) -> Result<f64> {
        let eq = embed_batches(self.model, Side::Query, &self.val_query)?;
        let er = embed_batches(self.model, Side::Response, &self.val_response)?;
        match (&self.val_labels, &self.val_set) {
            (Some(y), _) => {
                let cos: Vec<f64> = (0..y.len())
                    .map(|i| eq.row(i).iter().zip(er.row(i)).map(|(a, b)| a * b).sum())
                    .collect();
                metrics::roc_auc(y, &cos)
            }
            (None, Some(set)) => retrieval_score(&eq, &er, set),
            (None, None) => Err(Error::InvalidConfig(
                "matching validation has no targets".into(),
            )),
        }
    }
}

/// Binary match label of a cell: numbers are positive when equal to 1,
/// strings when one of `1`, `true`, `yes`.
pub(crate) fn match_label(cell: &Cell) -> Option<bool> {
    match cell {
        Cell::Null => None,
        Cell::Number(x) => Some(*x == 1.0),
        Cell::Text(s) => Some(matches!(
            s.trim().to_ascii_lowercase().as_str(),
            "1" | "1.0" | "true" | "yes"
        )),
        Cell::Bytes(_) => None,
    }
}

pub(crate) fn labels_of(samples: &[ProcessedSample]) -> Option<Labels> {
    let first = samples.first()?.label?;
    Some(match first {
        Label::Class(_) => Labels::Classes(
            samples
                .iter()
                .filter_map(|s| match s.label {
                    Some(Label::Class(c)) => Some(c),
                    _ => None,
                })
                .collect(),
        ),
        Label::Value(_) => Labels::Values(
            samples
                .iter()
                .filter_map(|s| match s.label {
                    Some(Label::Value(v)) => Some(v),
                    _ => None,
                })
                .collect(),
        ),
    })
}
