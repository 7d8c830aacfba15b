//! Artifact directory: `metadata.json`, `pipeline.json`,
//! `weights.bin` + `weights.manifest.json`, `checkpoints/NNNN.bin`,
//! `history.jsonl`, and the resume files of an unfinished run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_network, Network, Pipelines, TaskSpec, Trained};
use crate::error::{Error, Result};
use crate::metrics::MetricName;
use crate::models::weights::{
    encode_tensors, match_store, read_tensors, save_params, write_tensors,
};
use crate::models::ParamStore;
use crate::pipeline::PipelineState;
use crate::table::{ProblemType, TableSchema};
use crate::tensor::Tensor;
use crate::trainer::{
    read_history, write_history, AdamW, CheckpointRecord, HistoryRecord, PresetConfig, Quality,
    TrainState, TrainStatus,
};

pub const ARTIFACT_FORMAT: &str = "fuselite-predictor";
pub const ARTIFACT_VERSION: u32 = 1;

const METADATA: &str = "metadata.json";
const PIPELINE: &str = "pipeline.json";
const RESPONSE_PIPELINE: &str = "pipeline.response.json";
const WEIGHTS: &str = "weights.bin";
const WEIGHTS_MANIFEST: &str = "weights.manifest.json";
const HISTORY: &str = "history.jsonl";
const CHECKPOINTS: &str = "checkpoints";
const RESUME: &str = "resume.json";
const OPTIMIZER: &str = "optimizer.bin";
const OPTIMIZER_MANIFEST: &str = "optimizer.manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct CheckpointEntry {
    pub step: u64,
    pub val_score: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Metadata {
    pub format: String,
    pub version: u32,
    pub task: TaskSpec,
    pub problem_type: ProblemType,
    pub schema: TableSchema,
    pub metric: MetricName,
    pub quality: Quality,
    pub preset: PresetConfig,
    pub overrides: BTreeMap<String, serde_json::Value>,
    pub status: TrainStatus,
    pub last_step: u64,
    pub soup_members: Vec<u64>,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl Metadata {
    pub fn of(task: &TaskSpec, t: &Trained) -> Self {
        Metadata {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            task: task.clone(),
            problem_type: t.problem_type,
            schema: t.schema.clone(),
            metric: t.metric,
            quality: t.quality,
            preset: t.preset.clone(),
            overrides: t.overrides.clone(),
            status: t.status,
            last_step: t.last_step(),
            soup_members: t.soup_members.clone(),
            checkpoints: entries(&t.checkpoints),
        }
    }
}

fn entries(records: &[CheckpointRecord]) -> Vec<CheckpointEntry> {
    records
        .iter()
        .map(|c| CheckpointEntry {
            step: c.step,
            val_score: c.val_score,
            file: format!("{CHECKPOINTS}/{:04}.bin", c.step),
        })
        .collect()
}

/// Scalar part of an unfinished [`TrainState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResumeDoc {
    step_offset: u64,
    run_step: u64,
    total_steps: u64,
    steps_per_epoch: u64,
    best_score: Option<f64>,
    bad_checks: usize,
    n_checks: usize,
    optimizer_steps: u64,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptArtifact {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn manifest_path(bin: &Path) -> std::path::PathBuf {
    bin.with_extension("manifest.json")
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes the artifact of a trained predictor.
pub(crate) fn write(
    dir: &Path,
    task: &TaskSpec,
    t: &Trained,
    pending: Option<&TrainState>,
) -> Result<()> {
    let mut meta = Metadata::of(task, t);
    if let Some(s) = pending {
        meta.checkpoints = entries(&s.checkpoints);
    }
    let checkpoints = pending.map_or(&t.checkpoints, |s| &s.checkpoints);
    write_parts(
        dir,
        &meta,
        &t.pipelines,
        t.network.params(),
        &t.history,
        checkpoints,
        pending,
    )
}

/// Writes a resumable snapshot of a run at a validation boundary.
pub(crate) fn write_snapshot(
    dir: &Path,
    template: &Metadata,
    pipelines: &Pipelines,
    params: &ParamStore,
    history: &[HistoryRecord],
    state: &TrainState,
) -> Result<()> {
    let meta = Metadata {
        status: TrainStatus::Running,
        last_step: history.last().map_or(0, |r| r.step),
        soup_members: Vec::new(),
        checkpoints: entries(&state.checkpoints),
        ..template.clone()
    };
    write_parts(
        dir,
        &meta,
        pipelines,
        params,
        history,
        &state.checkpoints,
        Some(state),
    )
}

fn write_parts(
    dir: &Path,
    meta: &Metadata,
    pipelines: &Pipelines,
    params: &ParamStore,
    history: &[HistoryRecord],
    checkpoints: &[CheckpointRecord],
    pending: Option<&TrainState>,
) -> Result<()> {
    let ck_dir = dir.join(CHECKPOINTS);
    std::fs::create_dir_all(&ck_dir)?;
    write_json(&dir.join(METADATA), meta)?;
    std::fs::write(dir.join(PIPELINE), pipelines.main.to_json()? + "\n")?;
    match &pipelines.response {
        Some(r) => std::fs::write(dir.join(RESPONSE_PIPELINE), r.to_json()? + "\n")?,
        None => remove_if_exists(&dir.join(RESPONSE_PIPELINE))?,
    }
    save_params(params, &dir.join(WEIGHTS), &dir.join(WEIGHTS_MANIFEST))?;

    let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
    let keep: Vec<String> = entries(checkpoints).into_iter().map(|e| e.file).collect();
    for c in checkpoints {
        let bin = dir.join(format!("{CHECKPOINTS}/{:04}.bin", c.step));
        write_tensors(
            names.iter().copied().zip(c.weights.iter()),
            &bin,
            &manifest_path(&bin),
        )?;
    }
    for entry in std::fs::read_dir(&ck_dir)? {
        let path = entry?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        let stem = file.split('.').next().unwrap_or_default();
        if !keep.iter().any(|k| k.ends_with(&format!("/{stem}.bin"))) {
            remove_if_exists(&path)?;
        }
    }
    write_history(history, &dir.join(HISTORY))?;

    match pending {
        Some(s) => {
            let doc = ResumeDoc {
                step_offset: s.step_offset,
                run_step: s.run_step,
                total_steps: s.total_steps,
                steps_per_epoch: s.steps_per_epoch,
                best_score: s.best_score,
                bad_checks: s.bad_checks,
                n_checks: s.n_checks,
                optimizer_steps: s.optimizer.t,
            };
            write_json(&dir.join(RESUME), &doc)?;
            let moments = optimizer_tensors(params, &s.optimizer);
            let (blob, manifest) = encode_tensors(moments.iter().map(|(n, t)| (n.as_str(), t)));
            std::fs::write(dir.join(OPTIMIZER), blob)?;
            write_json(&dir.join(OPTIMIZER_MANIFEST), &manifest)?;
        }
        None => {
            for f in [RESUME, OPTIMIZER, OPTIMIZER_MANIFEST] {
                remove_if_exists(&dir.join(f))?;
            }
        }
    }
    Ok(())
}

fn optimizer_tensors(params: &ParamStore, opt: &AdamW) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, p) in params.iter().enumerate() {
        if let (Some(Some(m)), Some(Some(v))) = (opt.m.get(i), opt.v.get(i)) {
            out.push((
                format!("m.{}", p.name),
                Tensor::new(vec![m.len()], m.clone()),
            ));
            out.push((
                format!("v.{}", p.name),
                Tensor::new(vec![v.len()], v.clone()),
            ));
        }
    }
    out
}

fn read_optimizer(dir: &Path, params: &ParamStore, steps: u64) -> Result<AdamW> {
    let bin = dir.join(OPTIMIZER);
    let tensors = read_tensors(&bin, &dir.join(OPTIMIZER_MANIFEST))?;
    let mut opt = AdamW::new(params.len());
    opt.t = steps;
    let index: BTreeMap<&str, usize> = params
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.as_str(), i))
        .collect();
    for (name, t) in tensors {
        let (slot, pname) = name
            .split_once('.')
            .ok_or_else(|| corrupt(&bin, format!("bad moment name `{name}`")))?;
        let &i = index
            .get(pname)
            .ok_or_else(|| corrupt(&bin, format!("moment for unknown parameter `{pname}`")))?;
        if t.len() != params.iter().nth(i).map_or(0, |p| p.value.len()) {
            return Err(corrupt(
                &bin,
                format!("moment `{name}` has the wrong length"),
            ));
        }
        match slot {
            "m" => opt.m[i] = Some(t.into_data()),
            "v" => opt.v[i] = Some(t.into_data()),
            _ => return Err(corrupt(&bin, format!("bad moment name `{name}`"))),
        }
    }
    Ok(opt)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| corrupt(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| corrupt(path, e.to_string()))
}

/// Reads an artifact; with `resume`, also the unfinished run it holds.
pub(crate) fn read(dir: &Path, resume: bool) -> Result<(TaskSpec, Trained, Option<TrainState>)> {
    let meta_path = dir.join(METADATA);
    let raw: serde_json::Value = read_json(&meta_path)?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(ARTIFACT_FORMAT) {
        return Err(corrupt(&meta_path, "not a predictor artifact"));
    }
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != ARTIFACT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: ARTIFACT_VERSION,
        });
    }
    let meta: Metadata =
        serde_json::from_value(raw).map_err(|e| corrupt(&meta_path, e.to_string()))?;
    let read_state = |p: &Path| -> Result<PipelineState> {
        let text = std::fs::read_to_string(p).map_err(|e| corrupt(p, e.to_string()))?;
        PipelineState::from_json(&text).map_err(|e| match e {
            Error::VersionMismatch { .. } => e,
            other => corrupt(p, other.to_string()),
        })
    };
    let response_path = dir.join(RESPONSE_PIPELINE);
    let pipelines = Pipelines {
        main: read_state(&dir.join(PIPELINE))?,
        response: if response_path.exists() {
            Some(read_state(&response_path)?)
        } else {
            None
        },
    };
    let mut network: Network = build_network(&meta.task, &pipelines, &meta.preset)?;
    let weights = dir.join(WEIGHTS);
    let values = match_store(
        network.params(),
        read_tensors(&weights, &dir.join(WEIGHTS_MANIFEST))?,
        &weights,
    )?;
    network.params_mut().restore(&values);

    let history_path = dir.join(HISTORY);
    let history = read_history(&history_path).map_err(|e| corrupt(&history_path, e.to_string()))?;
    let mut checkpoints = Vec::with_capacity(meta.checkpoints.len());
    for e in &meta.checkpoints {
        let bin = dir.join(&e.file);
        let weights = match_store(
            network.params(),
            read_tensors(&bin, &manifest_path(&bin))?,
            &bin,
        )?;
        checkpoints.push(CheckpointRecord {
            step: e.step,
            val_score: e.val_score,
            weights,
        });
    }

    let resume_path = dir.join(RESUME);
    let pending = if resume && resume_path.exists() {
        let doc: ResumeDoc = read_json(&resume_path)?;
        let optimizer = read_optimizer(dir, network.params(), doc.optimizer_steps)?;
        Some(TrainState {
            step_offset: doc.step_offset,
            run_step: doc.run_step,
            total_steps: doc.total_steps,
            steps_per_epoch: doc.steps_per_epoch,
            optimizer,
            best_score: doc.best_score,
            bad_checks: doc.bad_checks,
            n_checks: doc.n_checks,
            checkpoints: checkpoints.clone(),
            history: history
                .iter()
                .filter(|r| r.step > doc.step_offset)
                .cloned()
                .collect(),
            status: TrainStatus::Interrupted,
            soup_members: Vec::new(),
        })
    } else {
        if resume {
            log::info!("artifact holds no unfinished run; loaded for inference");
        }
        None
    };
    let trained = Trained {
        schema: meta.schema,
        problem_type: meta.problem_type,
        metric: meta.metric,
        quality: meta.quality,
        preset: meta.preset,
        overrides: meta.overrides,
        pipelines,
        network,
        history,
        status: meta.status,
        soup_members: meta.soup_members,
        checkpoints,
    };
    Ok((meta.task, trained, pending))
}
