use thiserror::Error;

pub type Result<T, E = EasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EasError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("node {node} ({op}): {msg}")]
    NodeShape { node: usize, op: &'static str, msg: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("search space: {0}")]
    Space(String),

    #[error("encoding: {0}")]
    Encoding(String),

    #[error("illegal architecture: {0}")]
    IllegalArch(String),

    #[error("space too large to enumerate: {count} architectures exceeds limit {limit}")]
    SpaceTooLarge { count: u128, limit: u128 },

    #[error("label class {class} of sample {sample} is masked out")]
    MaskedLabel { sample: usize, class: usize },

    #[error("partition: {0}")]
    Partition(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("unknown superclass {index} (have {count})")]
    UnknownSuperclass { index: usize, count: usize },

    #[error("infeasible budget {budget_m:.3}M: no candidate within {attempts} attempts (minimal cost {min_cost_m:.3}M)")]
    InfeasibleBudget { budget_m: f64, attempts: usize, min_cost_m: f64 },

    #[error("training diverged at step {step}: non-finite loss (checkpoint: {checkpoint})")]
    Diverged { step: usize, checkpoint: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<EasError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl EasError {
    pub fn in_stage(self, stage: &'static str) -> EasError {
        EasError::Stage { stage, source: Box::new(self) }
    }
}
