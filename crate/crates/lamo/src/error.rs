//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus line {line}: {reason}")]
    CorpusFormat { line: usize, reason: String },

    #[error("duplicate visit ({patient_id}, {visit_index}) at line {line}")]
    DuplicateVisit {
        patient_id: String,
        visit_index: u32,
        line: usize,
    },

    #[error("invalid record for patient {patient_id}: {reason}")]
    InvalidRecord { patient_id: String, reason: String },

    #[error("split needs at least {needed} patients, corpus has {available}")]
    TooFewPatients { needed: usize, available: usize },

    #[error("split ratios must be positive and sum to 1 (got {0:?})")]
    BadSplitRatios([f64; 3]),

    #[error("unknown medication {name}{hint}")]
    UnknownMedication { name: String, hint: String },

    #[error("grouping: {0}")]
    Grouping(String),

    #[error("template: {0}")]
    Template(String),

    #[error("instruction budget of {max_tokens} tokens cannot fit the mandatory skeleton ({skeleton} tokens)")]
    BudgetTooSmall { max_tokens: usize, skeleton: usize },

    #[error("model: {0}")]
    Model(String),

    #[error("sequence of {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("non-finite loss on instance {instance_id}")]
    NonFiniteLoss { instance_id: String },

    #[error("adapter rank {rank} exceeds min(d_in, d_out) = {limit}")]
    RankTooLarge { rank: usize, limit: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error("checkpoint group-map digest {found:#x} does not match active group map {expected:#x}; refusing to use for inference")]
    GroupMapDigestMismatch { expected: u64, found: u64 },

    #[error("missing adapter set for group {0}")]
    MissingAdapter(usize),

    #[error("summarizer not configured")]
    SummarizerNotConfigured,

    #[error("summarizer transport failed (retriable): {0}")]
    SummarizerTransport(String),

    #[error("config {path} line {line}: {reason}")]
    Config {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("missing artifact {artifact}; run `{producer}` first")]
    MissingArtifact { artifact: String, producer: String },

    #[error("artifact {path} was produced with config digest {found:#x}, current config digest is {expected:#x}")]
    ArtifactDigestMismatch {
        path: String,
        expected: u64,
        found: u64,
    },

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
