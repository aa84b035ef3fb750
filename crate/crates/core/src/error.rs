use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{file}:{line}: column `{column}`: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        column: String,
        message: String,
    },

    #[error("{file}: unknown product(s): {}", names.join(", "))]
    UnknownProduct { file: PathBuf, names: Vec<String> },

    #[error("{file}:{line}: unknown field_id `{field_id}`")]
    UnknownField {
        file: PathBuf,
        line: u64,
        field_id: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no out-of-bag coverage: coverage 0 of {rows} rows")]
    NoOobCoverage { rows: usize },

    #[error("insufficient data for stage 2: no (nutrient, count) subset reaches {min_subset} records")]
    InsufficientStageTwo { min_subset: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("model file version `{found}` is not supported (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("model schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("mode mismatch: model trained in {model} mode, requested {requested}")]
    ModeMismatch { model: String, requested: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
