//! Error type shared by every module.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes, expected \"EMB1\"")]
    BadMagic,

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("header/payload size mismatch: header declares {expected} floats, payload holds {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("row count or row_id mismatch: {0}")]
    RowMismatch(String),

    #[error("duplicate row id {0:?}")]
    DuplicateRowId(String),

    #[error("k out of range: k={k}, valid range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("cluster count out of range: {0}")]
    ClusterCountOutOfRange(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("input too large: {0}")]
    InputTooLarge(String),

    #[error("missing slot {0:?}")]
    MissingSlot(String),

    #[error("no candidate combination sums to budget {0}")]
    NoFeasibleCombination(usize),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),

    #[error("degenerate targets: {0}")]
    DegenerateTargets(String),

    #[error("missing attribute {0:?}")]
    MissingAttribute(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, used verbatim in CLI error JSON.
    pub fn code(&self) -> String {
        match self {
            Error::BadMagic => "bad_magic".into(),
            Error::Truncated(_) => "truncated".into(),
            Error::SizeMismatch { .. } => "size_mismatch".into(),
            Error::NonFinite(_) => "non_finite".into(),
            Error::InvalidHeader(_) => "invalid_header".into(),
            Error::ShapeMismatch(_) => "shape_mismatch".into(),
            Error::RowMismatch(_) => "row_mismatch".into(),
            Error::DuplicateRowId(_) => "duplicate_row_id".into(),
            Error::KOutOfRange { .. } => "k_out_of_range".into(),
            Error::ClusterCountOutOfRange(_) => "cluster_count_out_of_range".into(),
            Error::LabelOutOfRange { .. } => "label_out_of_range".into(),
            Error::EmptyInput(_) => "empty_input".into(),
            Error::InputTooLarge(_) => "input_too_large".into(),
            Error::MissingSlot(id) => format!("missing_slot:{id}"),
            Error::NoFeasibleCombination(_) => "no_feasible_combination".into(),
            Error::SingularSystem(_) => "singular_system".into(),
            Error::NonFiniteLoss(_) => "non_finite_loss".into(),
            Error::DegenerateTargets(_) => "degenerate_targets".into(),
            Error::MissingAttribute(_) => "missing_attribute".into(),
            Error::OutOfRange(_) => "out_of_range".into(),
            Error::InvalidConfig(_) => "invalid_config".into(),
            Error::InvalidLayout(_) => "invalid_layout".into(),
            Error::Io(_) => "io".into(),
            Error::Json(_) => "json".into(),
            Error::Csv(_) => "csv".into(),
        }
    }
}
