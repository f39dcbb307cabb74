use std::fmt;
use std::path::PathBuf;

/// Named trace invariants. The `Display` form is what validation errors
/// report, so tooling can grep for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Invariant {
    ClsIndexRange,
    ClsWordIdNull,
    RowStochastic,
    AttentionRange,
    ClsSelfAttention,
    WordIdsMonotone,
    WordIdGap,
    NoWords,
    RationaleLength,
    UniqueExampleId,
    ManifestK,
    ManifestPositiveRate,
}

impl fmt::Display for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Invariant::ClsIndexRange => "cls_index in range",
            Invariant::ClsWordIdNull => "aggregation token has null word_id",
            Invariant::RowStochastic => "row-stochastic",
            Invariant::AttentionRange => "attention in [0, 1]",
            Invariant::ClsSelfAttention => "aggregation self-attention consistent",
            Invariant::WordIdsMonotone => "word_ids monotone",
            Invariant::WordIdGap => "gap in word indices",
            Invariant::NoWords => "at least one word",
            Invariant::RationaleLength => "rationale length",
            Invariant::UniqueExampleId => "unique example_id",
            Invariant::ManifestK => "avg_rationale_k >= 1",
            Invariant::ManifestPositiveRate => "positive_rate in [0, 1]",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: line {line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("example `{example_id}`: {invariant} violated: {detail}")]
    Validation {
        example_id: String,
        invariant: Invariant,
        detail: String,
    },

    #[error("example `{example_id}`: dimension mismatch: {detail}")]
    Dimension { example_id: String, detail: String },

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("{context}: length mismatch (expected {expected}, got {actual})")]
    LengthMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("undefined {metric}: {reason}")]
    Undefined {
        metric: &'static str,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("unknown example_id `{0}`")]
    UnknownExample(String),

    #[error("example `{example_id}`: unknown annotator `{annotator_id}`")]
    UnknownAnnotator {
        example_id: String,
        annotator_id: String,
    },

    #[error("example `{0}` has no rationales")]
    MissingRationale(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(
        example_id: &str,
        invariant: Invariant,
        detail: impl Into<String>,
    ) -> Self {
        Error::Validation {
            example_id: example_id.to_owned(),
            invariant,
            detail: detail.into(),
        }
    }

    /// True for errors caused by malformed or invalid input data, as opposed
    /// to runtime failures (I/O, divergence, ...).
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Dimension { .. }
            | Error::Version { .. }
            | Error::LengthMismatch { .. }
            | Error::UnknownExample(_)
            | Error::Model(_) => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    /// The invariant behind a validation failure, looking through stage
    /// wrappers.
    pub fn invariant(&self) -> Option<Invariant> {
        match self {
            Error::Validation { invariant, .. } => Some(*invariant),
            Error::Stage { source, .. } => source.invariant(),
            _ => None,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage: stage.into(),
            source: Box::new(e),
        })
    }
}
