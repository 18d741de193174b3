//! Normalization, top-K sparsification and column pruning.

use serde::{Deserialize, Serialize};

use super::{Entry, PefKind, PefSet, SparsePef};
use crate::error::{NpeffError, Result};

/// Scale a PEF to unit Frobenius norm, recording the original norm as `alpha`.
pub fn normalize(pef: &SparsePef, kind: PefKind) -> Result<SparsePef> {
    let norm = pef.frobenius_norm(kind);
    if norm == 0.0 || !norm.is_finite() {
        return Err(NpeffError::ZeroFisher {
            example_id: pef.example_id(),
        });
    }
    // For an LRM factor, F scales with the square of A.
    let scale = match kind {
        PefKind::Diag => 1.0 / norm,
        PefKind::Lrm => 1.0 / norm.sqrt(),
    };
    let entries = pef
        .entries()
        .iter()
        .map(|e| Entry::new(e.row, e.col, e.value * scale))
        .collect();
    Ok(SparsePef::from_parts_unchecked(
        pef.rank(),
        entries,
        norm,
        pef.example_id(),
    ))
}

/// Keep the `k` entries of largest magnitude. Ties go to the lower
/// `(row, col)` key; `k >= nnz` returns the PEF unchanged.
pub fn sparsify_topk(pef: &SparsePef, k: usize) -> SparsePef {
    if k >= pef.nnz() {
        return pef.clone();
    }
    let mut order: Vec<usize> = (0..pef.nnz()).collect();
    let entries = pef.entries();
    // Entries are already in key order, so a stable sort on magnitude keeps
    // the lower key first among equal magnitudes.
    order.sort_by(|&a, &b| {
        entries[b]
            .value
            .abs()
            .partial_cmp(&entries[a].value.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(k);
    order.sort_unstable();
    pef.map_entries(order.into_iter().map(|i| entries[i]).collect())
}

/// Normalize then sparsify every example.
///
/// For multi-row LRM factors, dropping entries can undo cancellation between
/// rows and push `||A^T A||_F` above one; such examples are scaled back to
/// unit norm so every preprocessed PEF has norm at most one.
pub fn preprocess(set: &PefSet, topk: usize) -> Result<PefSet> {
    let kind = set.kind();
    set.try_map(|p| {
        let sparse = sparsify_topk(&normalize(p, kind)?, topk);
        let norm = sparse.frobenius_norm(kind);
        if norm <= 1.0 {
            return Ok(sparse);
        }
        let scale = match kind {
            PefKind::Diag => 1.0 / norm,
            PefKind::Lrm => 1.0 / norm.sqrt(),
        };
        let entries = sparse
            .entries()
            .iter()
            .map(|e| Entry::new(e.row, e.col, e.value * scale))
            .collect();
        Ok(sparse.map_entries(entries))
    })
}

/// Strictly increasing original parameter indices kept after pruning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnIndexMap {
    original_dim: usize,
    kept: Vec<usize>,
}

impl ColumnIndexMap {
    pub fn identity(m: usize) -> Self {
        Self {
            original_dim: m,
            kept: (0..m).collect(),
        }
    }

    pub fn new(original_dim: usize, kept: Vec<usize>) -> Result<Self> {
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(NpeffError::IndexMap(
                "kept indices must be strictly increasing".into(),
            ));
        }
        if kept.last().is_some_and(|&last| last >= original_dim) {
            return Err(NpeffError::IndexMap(format!(
                "kept index exceeds original dimension {original_dim}"
            )));
        }
        Ok(Self { original_dim, kept })
    }

    pub fn original_dim(&self) -> usize {
        self.original_dim
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    /// Number of retained columns, `m'`.
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn to_reduced(&self, original: usize) -> Option<usize> {
        self.kept.binary_search(&original).ok()
    }

    pub fn to_original(&self, reduced: usize) -> usize {
        self.kept[reduced]
    }

    /// Scatter a length-`m'` vector into length `m`, zero at pruned indices.
    pub fn expand(&self, reduced: &[f64]) -> Result<Vec<f64>> {
        if reduced.len() != self.kept.len() {
            return Err(NpeffError::Shape {
                expected: self.kept.len(),
                got: reduced.len(),
            });
        }
        let mut out = vec![0.0; self.original_dim];
        for (&orig, &v) in self.kept.iter().zip(reduced) {
            out[orig] = v;
        }
        Ok(out)
    }

    /// Re-index a set over the original `m` columns onto the kept columns,
    /// dropping entries at pruned indices.
    pub fn apply(&self, set: &PefSet) -> Result<PefSet> {
        if set.m() != self.original_dim {
            return Err(NpeffError::IndexMap(format!(
                "set has m = {} but the map expects {}",
                set.m(),
                self.original_dim
            )));
        }
        let pefs = set
            .pefs()
            .iter()
            .map(|p| {
                let entries = p
                    .entries()
                    .iter()
                    .filter_map(|e| self.to_reduced(e.col).map(|c| Entry::new(e.row, c, e.value)))
                    .collect();
                p.map_entries(entries)
            })
            .collect();
        Ok(set.with_pefs(self.kept.len(), pefs))
    }
}

/// Drop every parameter index with fewer than `min_support` non-zero entries
/// across the whole set (entries of every class row count separately).
pub fn prune_columns(set: &PefSet, min_support: usize) -> Result<(PefSet, ColumnIndexMap)> {
    let mut counts = vec![0usize; set.m()];
    for p in set.pefs() {
        for e in p.entries() {
            counts[e.col] += 1;
        }
    }
    let kept: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= min_support)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() && set.m() > 0 {
        return Err(NpeffError::EmptyProblem(format!(
            "every column has support below {min_support}"
        )));
    }
    let map = ColumnIndexMap::new(set.m(), kept)?;
    let pruned = map.apply(set)?;
    Ok((pruned, map))
}
