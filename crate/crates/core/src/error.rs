use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("cannot read case file {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed case file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid case field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid cascade configuration: {0}")]
    Config(String),
    #[error("no admissible contingency found after {attempts} attempts")]
    Exhausted { attempts: usize },
    #[error("base operating point did not converge after {attempts} load draws")]
    BaseCaseDiverged { attempts: usize },
    #[error("zero total pre-contingency load")]
    ZeroLoad,
    #[error(transparent)]
    Case(#[from] CaseError),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("power flow state is not converged")]
    NotConverged,
    #[error("need at least 3 operating points to split, found {0}")]
    TooFewGroups(usize),
    #[error("invalid split fractions {0:?}")]
    BadFractions([f64; 3]),
    #[error("training partition is empty")]
    EmptyTrain,
    #[error("trajectory has {depth} rounds but only {requested} were requested")]
    TooManyRounds { depth: usize, requested: usize },
    #[error("dataset I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset record at line {line}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}
