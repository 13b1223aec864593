// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias using [`Error`].
pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes. Each variant maps to one single-line diagnostic in the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input matrix or vector failed validation (non-finite entries, bad shape).
    #[error("validation error: {0}")]
    Validation(String),

    /// A factor is numerically rank deficient.
    #[error("degenerate rank: smallest singular value {sigma_min:e} < {cutoff:e} x largest")]
    DegenerateRank { sigma_min: f64, cutoff: f64 },

    /// Condition number requested for an all-zero matrix.
    #[error("condition number undefined for a zero matrix")]
    UndefinedCondition,

    /// Empirical CDF or other statistic requested over no samples.
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("tensor `{name}` has shape {actual:?}, manifest expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{0}` contains a non-finite value")]
    NonFinite(String),

    #[error("unsupported bundle schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("checksum mismatch for {file}: manifest {expected}, computed {actual}")]
    Checksum {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("refusing to overwrite non-empty directory {0}")]
    DirectoryNotEmpty(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: usize, vocab: usize },

    #[error("unknown token text {0:?}")]
    UnknownToken(String),

    #[error("prompt length {len} exceeds context size {max}")]
    PromptTooLong { len: usize, max: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    /// Head whose query or key factor is too ill-conditioned for the unified bilinear form.
    #[error("layer {layer} head {head} unsupported: condition number {kappa:e}")]
    UnsupportedHead { layer: usize, head: usize, kappa: f64 },

    #[error("operation requires a rotary head")]
    NotRotary,

    /// Source index after destination index.
    #[error("causal mask violated: source {s} > destination {d}")]
    CausalMask { d: usize, s: usize },

    #[error("threshold {tau} unreachable: weight stays at {weight} after removing every candidate")]
    TauUnreachable { tau: f64, weight: f64 },

    #[error("intervention check failed at layer {layer} head {head} ({d},{s}): weight {weight} >= tau {tau}")]
    InterventionCheck {
        layer: usize,
        head: usize,
        d: usize,
        s: usize,
        weight: f64,
        tau: f64,
    },

    #[error("no component has positive direct effect on the target logit")]
    NoSeed,

    #[error("graph carries no signal vectors; re-trace with vectors enabled")]
    MissingVectors,

    #[error("granularity mismatch: {0} vs {1}")]
    GranularityMismatch(String, String),

    #[error("distance matrix is not symmetric at ({0},{1})")]
    NonSymmetric(usize, usize),

    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("p-value {0} outside [0, 1]")]
    PValueRange(f64),

    #[error("endpoint transport failure: {0}")]
    Transport(String),

    #[error("could not parse model response: {0}")]
    Parse(String),

    #[error("no recorded response for request {0}")]
    ReplayMiss(String),

    #[error("graph format error: {0}")]
    GraphFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable name of the failure class, used for CLI diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::DegenerateRank { .. } => "degenerate-rank",
            Error::UndefinedCondition => "undefined-condition",
            Error::EmptyInput(_) => "empty-input",
            Error::ShapeMismatch { .. } => "shape",
            Error::MissingTensor(_) => "missing-tensor",
            Error::NonFinite(_) => "non-finite",
            Error::SchemaVersion { .. } => "schema-version",
            Error::Checksum { .. } => "checksum",
            Error::DirectoryNotEmpty(_) => "overwrite-refused",
            Error::Config(_) => "config",
            Error::TokenOutOfVocab { .. } | Error::UnknownToken(_) => "vocab",
            Error::PromptTooLong { .. } => "prompt-too-long",
            Error::OutOfRange(_) => "out-of-range",
            Error::UnsupportedHead { .. } => "unsupported-head",
            Error::NotRotary => "not-rotary",
            Error::CausalMask { .. } => "causal-mask",
            Error::TauUnreachable { .. } => "tau-unreachable",
            Error::InterventionCheck { .. } => "intervention-check",
            Error::NoSeed => "no-seed",
            Error::MissingVectors => "missing-vectors",
            Error::GranularityMismatch(..) => "granularity",
            Error::NonSymmetric(..) => "non-symmetric",
            Error::DegenerateGroup(_) => "degenerate-group",
            Error::ZeroVector => "zero-vector",
            Error::PValueRange(_) => "p-value",
            Error::Transport(_) => "transport",
            Error::Parse(_) => "parse",
            Error::ReplayMiss(_) => "replay-miss",
            Error::GraphFormat(_) => "graph-format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
