//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A hyperparameter or flag combination is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// A softmax slice contained only -inf entries.
    #[error("degenerate softmax slice: every entry is -inf")]
    DegenerateSlice,

    /// Bad input data (token id out of range, malformed batch, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Sequence longer than the learned position table.
    #[error("sequence length {len} exceeds maximum {max} (no ALiBi, learned positions only)")]
    SequenceTooLong { len: usize, max: usize },

    /// Attention mask is not in right-padded (prefix) form.
    #[error("mask layout error: {0}")]
    MaskLayout(String),

    /// cu_seqlens or packed-batch bookkeeping is inconsistent.
    #[error("packing error: {0}")]
    Packing(String),

    /// Corpus or vocab ingestion failed.
    #[error("ingestion error in {file}:{line}: {message}")]
    Ingestion {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at step {step}{}{}", param.as_deref().map(|p| format!(" (parameter {p})")).unwrap_or_default(), last_good.as_deref().map(|c| format!("; last good checkpoint: {}", c.display())).unwrap_or_default())]
    Divergence {
        step: u64,
        param: Option<String>,
        last_good: Option<PathBuf>,
    },

    /// A benchmark trial was too short (or otherwise unusable) to time.
    #[error("measurement error: {0}")]
    Measurement(String),

    /// Checkpoint/finetune configs do not match.
    #[error("incompatible configs; differing fields: {}", fields.join(", "))]
    Incompatible { fields: Vec<String> },

    /// lr_at asked for a step past the end of the schedule.
    #[error("schedule exhausted: step {step} > total_steps {total}")]
    ScheduleExhausted { step: u64, total: u64 },

    /// Checkpoint file is corrupt or has the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Metrics logs fed to the Pareto emitter disagree on the metric.
    #[error("schema error: {0}")]
    Schema(String),

    /// grad_check evaluated the function to a non-finite value.
    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 divergence/measurement.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ScheduleExhausted { .. } => 1,
            Error::Divergence { .. } | Error::Measurement(_) => 3,
            _ => 2,
        }
    }
}
