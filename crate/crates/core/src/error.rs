use std::io;

use thiserror::Error;

/// Errors raised anywhere in the NPEFF pipeline.
#[derive(Debug, Error)]
pub enum NpeffError {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },

    #[error("component index {index} out of range for {rank} components")]
    ComponentIndex { index: usize, rank: usize },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("example {example_id} has a zero Fisher matrix and cannot be normalized")]
    ZeroFisher { example_id: u64 },

    #[error("empty problem: {0}")]
    EmptyProblem(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numerical failure at step {step:?}: non-finite value at ({row}, {col})")]
    Numerical {
        step: Option<usize>,
        row: usize,
        col: usize,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("degenerate perturbation direction for component {component}")]
    DegenerateDirection { component: usize },

    #[error("index map mismatch: {0}")]
    IndexMap(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl NpeffError {
    /// Attach a step number to a numerical failure raised inside one update.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            NpeffError::Numerical { row, col, .. } => NpeffError::Numerical {
                step: Some(step),
                row,
                col,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, NpeffError>;
