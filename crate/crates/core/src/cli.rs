//! Command-line front end: `fit`, `evaluate`, `predict`, `embed`,
//! `match-fit` and `search`.
//!
//! Results go to stdout as JSON or delimited text; logs go to stderr.
//! Exit codes: 0 success, 1 usage error, 2 data or model error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::{MetricName, MetricSpec};
use crate::models::Side;
use crate::predictor::{
    random_search, EvalOptions, FitOptions, MatchingSpec, Predictor, RandomSearchSpec,
    RetrievalDirection,
};
use crate::table::{read_csv, Cell, CsvOptions, MultimodalTable, ProblemType};
use crate::tensor::Tensor;
use crate::trainer::{PresetConfig, Quality};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "fuselite",
    version,
    about = "Multimodal AutoML on tables of text, images and numbers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a predictor and write its artifact directory.
    Fit(FitArgs),
    /// Print a JSON score report for labeled data.
    Evaluate(EvaluateArgs),
    /// Write predictions as delimited text.
    Predict(PredictArgs),
    /// Write embeddings as delimited text.
    Embed(EmbedArgs),
    /// Train a matching predictor on paired columns.
    MatchFit(MatchFitArgs),
    /// Random hyperparameter search; prints the trial log as JSON.
    Search(SearchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// medium, high or best.
    #[arg(long)]
    pub preset: Option<String>,
    /// Seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Preset override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Validation table; a holdout is split off when absent.
    #[arg(long)]
    pub tuning: Option<PathBuf>,
    #[arg(long, env = "FUSELITE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    #[arg(long)]
    pub label: String,
    /// binary, multiclass or regression; inferred when absent.
    #[arg(long)]
    pub problem_type: Option<String>,
}

#[derive(Debug, Args)]
pub struct MatchFitArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    /// ttm, iim or itm.
    #[arg(long)]
    pub problem_type: String,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub response: String,
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    #[arg(long)]
    pub label: String,
    #[arg(long, default_value_t = 4)]
    pub trials: usize,
    /// JSON object of candidate lists, e.g. `{"learning_rate":[1e-4,1e-3]}`.
    #[arg(long)]
    pub space: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub metric: Option<String>,
    /// Retrieve query items with response items.
    #[arg(long)]
    pub reverse: bool,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// One column per class instead of the predicted label.
    #[arg(long)]
    pub proba: bool,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// query or response; matching predictors only.
    #[arg(long)]
    pub side: Option<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(flag: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("invalid value for `--{flag}`: {msg}"))
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match execute(cli.command, &mut out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    match command {
        Command::Fit(a) => {
            let problem = a
                .problem_type
                .as_deref()
                .map(|s| parse_problem(s, "problem-type"))
                .transpose()?;
            if problem.is_some_and(ProblemType::is_matching) {
                return Err(usage("problem-type", "use match-fit for matching problems"));
            }
            let opts = fit_options(&a.common)?;
            let data = read_table(&a.common.train, a.common.delimiter)?;
            let mut p = Predictor::new(a.label);
            if let Some(pt) = problem {
                p = p.with_problem_type(pt);
            }
            p.fit(&data, &opts)?;
            p.save(&a.common.out)?;
            write_json(out, &fit_summary(&p))
        }
        Command::MatchFit(a) => {
            let problem = parse_problem(&a.problem_type, "problem-type")?;
            if !problem.is_matching() {
                return Err(usage("problem-type", "expected ttm, iim or itm"));
            }
            let opts = fit_options(&a.common)?;
            let data = read_table(&a.common.train, a.common.delimiter)?;
            let spec = MatchingSpec {
                problem_type: problem,
                query_column: a.query,
                response_column: a.response,
                label: a.label,
            };
            let p = Predictor::fit_matching(&data, spec, &opts)?;
            p.save(&a.common.out)?;
            write_json(out, &fit_summary(&p))
        }
        Command::Search(a) => {
            let mut spec = match &a.space {
                Some(s) => RandomSearchSpec {
                    trials: a.trials,
                    space: serde_json::from_str(s).map_err(|e| usage("space", e))?,
                },
                None => RandomSearchSpec {
                    trials: a.trials,
                    ..RandomSearchSpec::default()
                },
            };
            spec.trials = a.trials;
            spec.validate().map_err(|e| usage("space", e))?;
            let opts = fit_options(&a.common)?;
            let data = read_table(&a.common.train, a.common.delimiter)?;
            let (best, log) = random_search(&data, &a.label, &spec, &opts, a.common.seed)?;
            best.save(&a.common.out)?;
            write_json(
                out,
                &serde_json::json!({ "trials": log, "best": fit_summary(&best) }),
            )
        }
        Command::Evaluate(a) => {
            let metric = a
                .metric
                .as_deref()
                .map(|m| {
                    MetricName::parse(m)
                        .ok_or_else(|| usage("metric", format!("unknown metric `{m}`")))
                })
                .transpose()?;
            let p = Predictor::load(&a.model, false)?;
            let data = read_table(&a.data, a.delimiter)?;
            let options = EvalOptions {
                metric: metric.map(MetricSpec::new),
                direction: if a.reverse {
                    RetrievalDirection::ResponseToQuery
                } else {
                    RetrievalDirection::QueryToResponse
                },
            };
            let report = p.evaluate_with(&data, &options)?;
            write_json(out, &report)
        }
        Command::Predict(a) => {
            let p = Predictor::load(&a.model, false)?;
            let data = read_table(&a.data, a.delimiter)?;
            if a.proba {
                let proba = p.predict_proba(&data)?;
                let header: Vec<String> = match p.class_labels() {
                    Some(c) => c.iter().map(Cell::to_string).collect(),
                    None => vec!["no_match".into(), "match".into()],
                };
                write_rows(
                    out,
                    &header,
                    proba
                        .iter()
                        .map(|r| r.iter().map(|v| v.to_string()).collect()),
                    a.delimiter,
                )?;
            } else {
                write_predictions(out, &p.predict(&data)?, a.delimiter)?;
            }
            Ok(())
        }
        Command::Embed(a) => {
            let side = a
                .side
                .as_deref()
                .map(|s| match s {
                    "query" => Ok(Side::Query),
                    "response" => Ok(Side::Response),
                    other => Err(usage(
                        "side",
                        format!("expected query or response, got `{other}`"),
                    )),
                })
                .transpose()?;
            let p = Predictor::load(&a.model, false)?;
            let data = read_table(&a.data, a.delimiter)?;
            let emb = match side {
                Some(s) => p.extract_item_embedding(&data, s)?,
                None => p.extract_embedding(&data)?,
            };
            write_embeddings(out, &emb, a.delimiter)?;
            Ok(())
        }
    }
}

fn parse_problem(s: &str, flag: &str) -> std::result::Result<ProblemType, Failure> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| usage(flag, format!("unknown problem type `{s}`")))
}

/// `key=value` pairs; values parse as JSON, falling back to a string.
pub fn parse_overrides(pairs: &[String]) -> Result<BTreeMap<String, Value>> {
    let mut map = BTreeMap::new();
    for pair in pairs {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{pair}`")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        map.insert(k.trim().to_string(), value);
    }
    PresetConfig::default().with_overrides(map.iter().map(|(k, v)| (k.as_str(), v)))?;
    Ok(map)
}

fn fit_options(a: &TrainArgs) -> std::result::Result<FitOptions, Failure> {
    let preset = a
        .preset
        .as_deref()
        .map(|s| Quality::parse(s).ok_or_else(|| usage("preset", format!("unknown preset `{s}`"))))
        .transpose()?;
    let time_limit = a
        .time_limit
        .map(|s| {
            if s.is_finite() && s > 0.0 {
                Ok(Duration::from_secs_f64(s))
            } else {
                Err(usage("time-limit", "must be a positive number of seconds"))
            }
        })
        .transpose()?;
    let overrides = parse_overrides(&a.set).map_err(|e| usage("set", e))?;
    let tuning_data = a
        .tuning
        .as_ref()
        .map(|p| read_table(p, a.delimiter))
        .transpose()?;
    Ok(FitOptions {
        preset,
        time_limit,
        overrides,
        seed: a.seed,
        tuning_data,
        ..FitOptions::default()
    })
}

fn read_table(path: &PathBuf, delimiter: char) -> std::result::Result<MultimodalTable, Failure> {
    let d = u8::try_from(delimiter)
        .map_err(|_| usage("delimiter", "must be a single ASCII character"))?;
    read_csv(
        path,
        &CsvOptions {
            delimiter: d,
            image_root: None,
        },
    )
    .map_err(|e| Failure::Data(e.context(format!("reading {}", path.display()))))
}

fn fit_summary(p: &Predictor) -> Value {
    serde_json::json!({
        "problem_type": p.problem_type(),
        "metric": p.metric().map(|m| m.as_str()),
        "status": p.status(),
        "steps": p.history().last().map_or(0, |r| r.step),
        "soup_members": p.soup_members(),
    })
}

fn write_json(
    out: &mut dyn Write,
    value: &impl serde::Serialize,
) -> std::result::Result<(), Failure> {
    serde_json::to_writer_pretty(&mut *out, value).map_err(Error::from)?;
    writeln!(out).map_err(Error::from)?;
    Ok(())
}

fn write_rows(
    out: &mut dyn Write,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>>,
    delimiter: char,
) -> Result<()> {
    let d = u8::try_from(delimiter)
        .map_err(|_| Error::InvalidConfig("delimiter must be ASCII".into()))?;
    let mut w = csv::WriterBuilder::new().delimiter(d).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

/// One `prediction` column.
pub fn write_predictions(out: &mut dyn Write, preds: &[Cell], delimiter: char) -> Result<()> {
    write_rows(
        out,
        &["prediction".to_string()],
        preds.iter().map(|c| vec![c.to_string()]),
        delimiter,
    )
}

/// Columns `e0, e1, ...`, one row per input row.
pub fn write_embeddings(out: &mut dyn Write, emb: &Tensor, delimiter: char) -> Result<()> {
    let width = emb.shape().get(1).copied().unwrap_or(0);
    let header: Vec<String> = (0..width).map(|i| format!("e{i}")).collect();
    let rows = (0..emb.shape()[0]).map(|r| emb.row(r).iter().map(|v| v.to_string()).collect());
    write_rows(out, &header, rows, delimiter)
}
