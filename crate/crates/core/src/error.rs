use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` has no cells")]
    EmptyColumn(String),
    #[error("label column has a single distinct value ({0}); nothing to learn")]
    DegenerateLabel(String),
    #[error("too few rows: {0}")]
    TooFewRows(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("no informative feature column remains after preprocessing")]
    AllColumnsDropped,
    #[error("cannot decode image in column `{column}`, row {row}: {reason}")]
    ImageDecode {
        column: String,
        row: usize,
        reason: String,
    },
    #[error("samples in a batch have different field layouts: {0}")]
    HeterogeneousSamples(String),
    #[error("schema has no feature columns")]
    NoFeatureColumns,
    #[error("shape mismatch in `{field}`: expected {expected}, got {actual}")]
    ShapeMismatch {
        field: String,
        expected: String,
        actual: String,
    },
    #[error("batch lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown LoRA target `{0}`")]
    UnknownTarget(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("no checkpoints to average")]
    NoCheckpoints,
    #[error("target is constant; R² is undefined")]
    ConstantTarget,
    #[error("ROC-AUC needs both classes present")]
    SingleClass,
    #[error("gallery has {gallery} items but K = {k} was requested")]
    GalleryTooSmall { gallery: usize, k: usize },
    #[error("invalid metric input: {0}")]
    InvalidMetricInput(String),
    #[error("time limit elapsed before the first validation check completed")]
    TimeLimitTooSmall,
    #[error("matching problem {0} requires a binary label column")]
    MissingLabel(String),
    #[error("data has no label column `{0}`")]
    MissingLabelColumn(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("predict_proba is undefined for regression")]
    ProbaOnRegression,
    #[error("corrupt artifact at {path}: {reason}")]
    CorruptArtifact { path: PathBuf, reason: String },
    #[error("artifact format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("unknown hyperparameter `{0}`")]
    UnknownHyperparameter(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("predictor is not trained")]
    NotTrained,
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any `Context` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| e.context(context))
    }
}
