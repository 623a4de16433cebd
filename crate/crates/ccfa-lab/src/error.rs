//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// Two matrices that must share a shape do not.
    #[error("shape mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A matrix constructor received inconsistent data.
    #[error("data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },

    /// A non-finite value appeared where the numeric contract forbids it.
    #[error("non-finite value in {context} at entry ({row}, {col})")]
    NonFinite {
        context: &'static str,
        row: usize,
        col: usize,
    },

    /// A label was outside the valid class range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// New classes overlap classes the model or buffer already holds.
    #[error("class {class} already present")]
    ClassOverlap { class: usize },

    /// An operation requiring a nonempty input got an empty one.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// The exact target-selection solver was asked for an instance beyond
    /// its enumeration budget.
    #[error(
        "instance b={b}, c_old={c_old} exceeds enumeration budget b<={max_b}, c_old<={max_c}; \
         use the relaxed solver"
    )]
    EnumerationBudget {
        b: usize,
        c_old: usize,
        max_b: usize,
        max_c: usize,
    },

    /// The PGD attack saw a non-finite gradient.
    #[error("non-finite attack gradient at step {step}")]
    AttackDiverged { step: usize },

    /// The LP solver failed to find a solution.
    #[error("linear program {0}")]
    Infeasible(&'static str),

    /// A feature file failed to parse.
    #[error("feature file: {0}")]
    FeatureFile(String),

    /// An experiment config failed validation.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(a: (usize, usize), b: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            left_rows: a.0,
            left_cols: a.1,
            right_rows: b.0,
            right_cols: b.1,
        }
    }
}
