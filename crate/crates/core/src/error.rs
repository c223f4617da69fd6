use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("base-class id {id} appears in both `{first}` and `{second}`")]
    DuplicateBaseClass { id: usize, first: String, second: String },
    #[error("base-class id {id} in `{superclass}` is outside the base dataset (0..{num_classes})")]
    UnknownBaseClass { id: usize, superclass: String, num_classes: usize },
    #[error("unknown superclass `{0}`")]
    UnknownSuperclass(String),
    #[error("unknown class or target `{0}`")]
    UnknownTarget(String),
    #[error("unknown architecture `{arch}` (registered: {known})")]
    UnknownArch { arch: String, known: String },
    #[error("layer {layer} does not resolve; valid layers: {valid}")]
    UnknownLayer { layer: String, valid: String },
    #[error("no auxiliary model for class {class} at layer {layer}")]
    MissingAux { class: usize, layer: String },
    #[error("class {0} has no training examples")]
    EmptyClass(usize),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite loss at attack iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("oracle failed after {completed} of {total} inputs: {reason}")]
    OracleFailure { completed: usize, total: usize, reason: String },
    #[error("query budget exhausted ({used}/{budget} used, {requested} requested)")]
    BudgetExhausted { used: usize, budget: usize, requested: usize },
    #[error("label-space mismatch: {0}")]
    LabelSpaceMismatch(String),
    #[error("missing prerequisite stage `{stage}`: {detail}")]
    MissingStage { stage: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
