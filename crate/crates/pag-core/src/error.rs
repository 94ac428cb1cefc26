//! Error type shared across the certification pipeline.
//!
//! Errors split into three broad families, which the CLI maps onto distinct
//! exit codes:
//!
//! * parameter / input problems (bad probabilities, malformed files,
//!   inconsistent certificate inputs) — usage errors;
//! * external-tool failures (protocol violations, crashes, timeouts) —
//!   oracle errors;
//! * plain I/O and serialization failures.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, PagError>;

#[derive(Debug, Error)]
pub enum PagError {
    /// A numeric parameter fell outside its admissible range. Probability
    /// parameters are validated strictly against open intervals; boundary
    /// values are rejected.
    #[error("parameter out of range: {name} = {value} (requires {requirement})")]
    ParameterOutOfRange {
        name: &'static str,
        value: f64,
        requirement: &'static str,
    },

    /// The quantile-index bound s·p − √(2·s·p·ln(1/δ)) did not exceed 1, so
    /// no order-statistic index is certifiable at this sample size and
    /// confidence level.
    #[error(
        "no valid quantile index: s·p − sqrt(2·s·p·ln(1/delta)) = {bound} <= 1 \
         for s = {s}, p = {p}, delta = {delta} (sample too small)"
    )]
    NoValidIndex { s: u64, p: f64, delta: f64, bound: f64 },

    /// The sample-size bracket search failed to terminate. This signals an
    /// implementation bug or pathological parameters, not a user error.
    #[error("sample-size search did not converge for epsilon = {epsilon}, delta = {delta}, d = {d}")]
    NonConvergence { epsilon: f64, delta: f64, d: u64 },

    /// The analytic distance oracle was handed a decision boundary with an
    /// all-zero weight difference; the distance to it is undefined.
    #[error("zero weight vector: the class-difference weights are all zero")]
    ZeroWeightVector,

    /// A model file or in-memory model violated a structural invariant.
    #[error("invalid model: {0}")]
    ModelFormat(String),

    /// A dataset file could not be parsed or was structurally inconsistent.
    #[error("invalid dataset: {0}")]
    DatasetFormat(String),

    /// An operation that needs at least one point received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// The inputs to certificate assembly disagree with each other (e.g. the
    /// sample is smaller than the size the parameters require).
    #[error("inconsistent certificate inputs: {0}")]
    InconsistentParams(String),

    /// The model presented at evaluation time is not the model the
    /// certificate was issued for.
    #[error("model hash mismatch: certificate has {expected}, provided model hashes to {actual}")]
    HashMismatch { expected: String, actual: String },

    /// The requested operation is not defined for this input (e.g. the
    /// closed-form distance oracle on a multi-layer network).
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The external tool sent bytes that do not form a valid response:
    /// unparseable line, missing field, unknown `kind`, or an id that was
    /// never issued / already answered. `request_id` is present whenever an
    /// id could be recovered from the offending line.
    #[error("oracle protocol violation{}: {detail}", fmt_req_id(.request_id))]
    ProtocolViolation {
        request_id: Option<u64>,
        detail: String,
    },

    /// The external tool exited (or closed its stdout) while requests were
    /// still outstanding.
    #[error("oracle tool crashed after {completed} completed responses: {detail}")]
    ToolCrash { completed: usize, detail: String },

    /// An individual request exceeded the configured response deadline.
    #[error("oracle timeout waiting for response to request {request_id} ({timeout_ms} ms)")]
    OracleTimeout { request_id: u64, timeout_ms: u64 },

    /// An oracle evaluation failed while building a sample; `index` is the
    /// draw (or row) the failure belongs to.
    #[error("oracle failed at draw index {index}: {source}")]
    OracleAt {
        index: usize,
        #[source]
        source: Box<PagError>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn fmt_req_id(id: &Option<u64>) -> String {
    match id {
        Some(id) => format!(" (request {id})"),
        None => String::new(),
    }
}

impl PagError {
    /// Shorthand for the pervasive probability-range failure.
    pub(crate) fn range(name: &'static str, value: f64, requirement: &'static str) -> Self {
        PagError::ParameterOutOfRange { name, value, requirement }
    }

    /// Wraps this error with the draw index it occurred at.
    pub fn at_index(self, index: usize) -> Self {
        PagError::OracleAt { index, source: Box::new(self) }
    }

    /// Walks through `OracleAt` wrappers to the underlying failure, for
    /// classifying exit codes without losing the index context.
    pub fn root_cause(&self) -> &PagError {
        match self {
            PagError::OracleAt { source, .. } => source.root_cause(),
            other => other,
        }
    }
}
