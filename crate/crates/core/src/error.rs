use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} (len {len})")]
    Index { what: &'static str, index: usize, len: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension { context: &'static str, expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("label {label} outside the {classes} training classes")]
    Label { label: usize, classes: usize },

    #[error("degenerate codebook: row {row} has zero norm")]
    DegenerateCodebook { row: usize },

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("non-finite gradient at optimizer step {step}")]
    Numeric { step: u64 },

    #[error("training diverged in epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Divergence { epoch: usize, last_finite_epoch: Option<usize> },

    #[error("incompatible model parts: codebook dim {codebook_dim}, backbone dim {backbone_dim}")]
    Compatibility { codebook_dim: usize, backbone_dim: usize },

    #[error("metric error: {0}")]
    Metric(String),
}
