//! Result type shared by the LRM and diagonal factorizers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{NpeffError, Result};
use crate::pef::{ColumnIndexMap, PefKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

/// Coefficients `W` (n x r, non-negative) and pseudo-Fisher rows (r x m').
///
/// For `PefKind::Lrm` row `j` of `components` is `g_j` with `H_j = g_j g_j^T`;
/// for `PefKind::Diag` it is the non-negative `h_j` with `H_j = Diag(h_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub kind: PefKind,
    pub w: Array2<f64>,
    pub components: Array2<f64>,
    pub index_map: ColumnIndexMap,
    pub loss_history: Vec<LossRecord>,
    /// Example ids of the rows of `w`, when known.
    pub example_ids: Vec<u64>,
    /// Leading components that were copied from a base decomposition and frozen.
    pub frozen_components: usize,
    /// Snapshot of whatever configuration produced this decomposition.
    pub config: serde_json::Value,
}

impl Decomposition {
    pub fn new(
        kind: PefKind,
        w: Array2<f64>,
        components: Array2<f64>,
        index_map: ColumnIndexMap,
    ) -> Result<Self> {
        let dec = Self {
            kind,
            w,
            components,
            index_map,
            loss_history: Vec::new(),
            example_ids: Vec::new(),
            frozen_components: 0,
            config: serde_json::Value::Null,
        };
        dec.validate()?;
        Ok(dec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.ncols() != self.components.nrows() {
            return Err(NpeffError::Shape {
                expected: self.components.nrows(),
                got: self.w.ncols(),
            });
        }
        if self.components.ncols() != self.index_map.len() {
            return Err(NpeffError::Shape {
                expected: self.index_map.len(),
                got: self.components.ncols(),
            });
        }
        if !self.example_ids.is_empty() && self.example_ids.len() != self.w.nrows() {
            return Err(NpeffError::Shape {
                expected: self.w.nrows(),
                got: self.example_ids.len(),
            });
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().map(|r| r.loss)
    }

    /// Component row `j` scattered back to the original parameter dimension.
    pub fn component_full(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.rank() {
            return Err(NpeffError::ComponentIndex {
                index: j,
                rank: self.rank(),
            });
        }
        self.index_map.expand(&self.components.row(j).to_vec())
    }
}

/// JSON snapshot of a run configuration for the NPFD metadata. With
/// deterministic reduction the worker count cannot affect the result, so it
/// is left out and the file bytes do not depend on it.
pub(crate) fn config_snapshot<T: Serialize>(config: &T, deterministic: bool) -> Result<serde_json::Value> {
    let mut value = serde_json::to_value(config)?;
    if deterministic {
        if let Some(map) = value.as_object_mut() {
            map.remove("workers");
        }
    }
    Ok(value)
}
