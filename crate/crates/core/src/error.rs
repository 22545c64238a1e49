use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("query `{query_id}`: claim `{claim_id}` is unlabeled, calibration data must carry labels")]
    UnlabeledCalibrationClaim { query_id: String, claim_id: String },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("query `{0}` has no group label")]
    MissingGroup(String),

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("failed to embed `{id}`: {source}")]
    Embedding {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("backend request failed: {0}")]
    Backend(String),

    #[error("unparseable backend response: {0}")]
    BackendResponse(String),

    #[error("claim `{0}` has no relevance score")]
    MissingRelevance(String),

    #[error("claim `{0}` is unlabeled")]
    Unlabeled(String),

    #[error("claim `{0}`: ground truth is required by this annotator")]
    MissingGroundTruth(String),

    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("cannot take a quantile of an empty score list")]
    EmptyScores,

    #[error("score {0} lies outside [0, 1]")]
    ScoreOutOfRange(f64),

    #[error("no calibrated threshold for group `{0}`")]
    UnknownGroup(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("outcomes do not match the labeled test set: {0}")]
    Mismatch(String),

    #[error("query `{query_id}`: {source}")]
    Context {
        query_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn in_query(self, query_id: &str) -> Self {
        match self {
            already @ Error::Context { .. } => already,
            other => Error::Context {
                query_id: query_id.to_string(),
                source: Box::new(other),
            },
        }
    }
}
