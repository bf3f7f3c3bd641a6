use gridcascade::DatasetError;
use gridcascade_autodiff::AdError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("multi-round forward needs `multi_round` in the model config")]
    NotMultiRound,
    #[error("teacher forcing needs labels for {needed} rounds, got {got}")]
    MissingTeacherLabels { needed: usize, got: usize },
    #[error("{0} rounds of output but {1} rounds of labels")]
    RoundMismatch(usize, usize),
    #[error("non-finite {component} loss at epoch {epoch}")]
    NonFiniteLoss { component: &'static str, epoch: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("checkpoint was trained on feature statistics {checkpoint}, dataset has {dataset}")]
    StatsMismatch { checkpoint: String, dataset: String },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("cannot access {path}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ModelError>;
