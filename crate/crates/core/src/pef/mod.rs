//! Sparse per-example Fisher (PEF) representations.
//!
//! Both variants share one storage type, [`SparsePef`]: a list of
//! `(row, param_index, value)` triples sorted by `(row, param_index)`.
//! For low-rank PEFs the rows are the class rows of the factor `A` with
//! `F = A^T A`; diagonal PEFs use a single row holding `f` with `F = Diag(f)`.
//! The [`PefKind`] of the enclosing [`PefSet`] decides which matrix the
//! entries represent.

mod format;
mod preprocess;

pub use format::{
    decode_decomposition, decode_pef_set, encode_decomposition, encode_pef_set,
    read_decomposition_file, read_pef_file, write_decomposition_file, write_pef_file,
};
pub use preprocess::{normalize, preprocess, prune_columns, sparsify_topk, ColumnIndexMap};

use serde::{Deserialize, Serialize};

use crate::error::{NpeffError, Result};
use crate::sandbox::LrmFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PefKind {
    Diag,
    Lrm,
}

impl PefKind {
    pub fn code(self) -> u8 {
        match self {
            PefKind::Diag => 0,
            PefKind::Lrm => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PefKind::Diag),
            1 => Some(PefKind::Lrm),
            _ => None,
        }
    }
}

impl std::fmt::Display for PefKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PefKind::Diag => "diag",
            PefKind::Lrm => "lrm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: u32,
    pub col: usize,
    pub value: f64,
}

impl Entry {
    pub fn new(row: u32, col: usize, value: f64) -> Self {
        Self { row, col, value }
    }

    fn key(&self) -> (u32, usize) {
        (self.row, self.col)
    }
}

/// One example's sparse PEF together with its pre-normalization norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePef {
    rank: u32,
    entries: Vec<Entry>,
    alpha: f64,
    example_id: u64,
}

impl SparsePef {
    /// Validating constructor. Entries must be sorted by `(row, col)` with
    /// unique keys and `row < rank`.
    pub fn new(rank: u32, entries: Vec<Entry>, alpha: f64, example_id: u64) -> Result<Self> {
        if rank == 0 {
            return Err(NpeffError::Domain("PEF rank must be positive".into()));
        }
        if let Some(bad) = entries.iter().find(|e| e.row >= rank) {
            return Err(NpeffError::Domain(format!(
                "entry row {} out of range for rank {rank}",
                bad.row
            )));
        }
        if entries.windows(2).any(|w| w[0].key() >= w[1].key()) {
            return Err(NpeffError::Domain(
                "PEF entries must be sorted with unique (row, col) keys".into(),
            ));
        }
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(NpeffError::Domain(format!("invalid alpha {alpha}")));
        }
        Ok(Self {
            rank,
            entries,
            alpha,
            example_id,
        })
    }

    pub(crate) fn from_parts_unchecked(
        rank: u32,
        entries: Vec<Entry>,
        alpha: f64,
        example_id: u64,
    ) -> Self {
        Self {
            rank,
            entries,
            alpha,
            example_id,
        }
    }

    /// Sparse LRM PEF from dense class rows. `alpha` is set to `||A^T A||_F`.
    pub fn lrm_from_rows(rows: &[Vec<f64>], example_id: u64) -> Result<Self> {
        if rows.is_empty() {
            return Err(NpeffError::Domain("LRM factor needs at least one row".into()));
        }
        let entries = rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(move |(c, &v)| Entry::new(r as u32, c, v))
            })
            .collect();
        let alpha = frobenius_norm_lrm(rows);
        Self::new(rows.len() as u32, entries, alpha, example_id)
    }

    pub fn lrm_from_factor(factor: &LrmFactor, example_id: u64) -> Result<Self> {
        Self::lrm_from_rows(&factor.rows, example_id)
    }

    /// Sparse diagonal PEF from a dense non-negative vector.
    pub fn diag_from_dense(f: &[f64], example_id: u64) -> Result<Self> {
        if let Some(v) = f.iter().find(|v| !(**v >= 0.0)) {
            return Err(NpeffError::Domain(format!(
                "diagonal PEF values must be non-negative, got {v}"
            )));
        }
        let entries = f
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(c, &v)| Entry::new(0, c, v))
            .collect();
        let alpha = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::new(1, entries, alpha, example_id)
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn example_id(&self) -> u64 {
        self.example_id
    }

    pub fn max_col(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.col).max()
    }

    /// Entries grouped by row; `rows()[k]` is the (possibly empty) slice of row `k`.
    pub fn rows(&self) -> Vec<&[Entry]> {
        let mut out = Vec::with_capacity(self.rank as usize);
        let mut start = 0;
        for k in 0..self.rank {
            let end = start + self.entries[start..].partition_point(|e| e.row == k);
            out.push(&self.entries[start..end]);
            start = end;
        }
        out
    }

    /// The `c x c` Gram matrix `A A^T` of the class rows.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let rows = self.rows();
        let c = rows.len();
        let mut gram = vec![vec![0.0; c]; c];
        for a in 0..c {
            for b in a..c {
                let v = sparse_dot(rows[a], rows[b]);
                gram[a][b] = v;
                gram[b][a] = v;
            }
        }
        gram
    }

    /// Frobenius norm of the represented `m x m` matrix.
    pub fn frobenius_norm(&self, kind: PefKind) -> f64 {
        match kind {
            PefKind::Diag => self
                .entries
                .iter()
                .map(|e| e.value * e.value)
                .sum::<f64>()
                .sqrt(),
            PefKind::Lrm => self
                .gram()
                .iter()
                .flatten()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn to_dense_rows(&self, m: usize) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; m]; self.rank as usize];
        for e in &self.entries {
            rows[e.row as usize][e.col] = e.value;
        }
        rows
    }

    pub(crate) fn map_entries(&self, entries: Vec<Entry>) -> Self {
        Self {
            rank: self.rank,
            entries,
            alpha: self.alpha,
            example_id: self.example_id,
        }
    }
}

fn sparse_dot(a: &[Entry], b: &[Entry]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].col.cmp(&b[j].col) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].value * b[j].value;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

/// `||A^T A||_F` through the `c x c` Gram `A A^T`; the `m x m` product is never formed.
pub fn frobenius_norm_lrm(rows: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for (a, ra) in rows.iter().enumerate() {
        for (b, rb) in rows.iter().enumerate().skip(a) {
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            sum += if a == b { dot * dot } else { 2.0 * dot * dot };
        }
    }
    sum.sqrt()
}

/// A collection of PEFs of one kind over a common parameter dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PefSet {
    kind: PefKind,
    m: usize,
    pefs: Vec<SparsePef>,
    labels: Option<Vec<i64>>,
    predictions: Option<Vec<i64>>,
}

impl PefSet {
    pub fn new(kind: PefKind, m: usize, pefs: Vec<SparsePef>) -> Result<Self> {
        for p in &pefs {
            if let Some(col) = p.max_col() {
                if col >= m {
                    return Err(NpeffError::Domain(format!(
                        "example {} has parameter index {col} >= m = {m}",
                        p.example_id
                    )));
                }
            }
            if kind == PefKind::Diag {
                if p.rank != 1 {
                    return Err(NpeffError::Domain(
                        "diagonal PEFs must have rank 1".into(),
                    ));
                }
                if p.entries.iter().any(|e| !(e.value >= 0.0)) {
                    return Err(NpeffError::Domain(
                        "diagonal PEF values must be non-negative".into(),
                    ));
                }
            }
        }
        Ok(Self {
            kind,
            m,
            pefs,
            labels: None,
            predictions: None,
        })
    }


    pub fn with_labels(mut self, labels: Option<Vec<i64>>, predictions: Option<Vec<i64>>) -> Result<Self> {
        for v in labels.iter().chain(predictions.iter()) {
            if v.len() != self.pefs.len() {
                return Err(NpeffError::Shape {
                    expected: self.pefs.len(),
                    got: v.len(),
                });
            }
        }
        self.labels = labels;
        self.predictions = predictions;
        Ok(self)
    }

    pub fn kind(&self) -> PefKind {
        self.kind
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.pefs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pefs.is_empty()
    }

    pub fn pefs(&self) -> &[SparsePef] {
        &self.pefs
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn predictions(&self) -> Option<&[i64]> {
        self.predictions.as_deref()
    }

    pub fn example_ids(&self) -> Vec<u64> {
        self.pefs.iter().map(|p| p.example_id).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.pefs.iter().map(|p| p.alpha).collect()
    }

    /// Subset of examples by position, carrying labels/predictions along.
    pub fn select(&self, positions: &[usize]) -> Result<Self> {
        if let Some(&bad) = positions.iter().find(|&&p| p >= self.len()) {
            return Err(NpeffError::Shape {
                expected: self.len(),
                got: bad,
            });
        }
        let pick = |v: &Vec<i64>| positions.iter().map(|&p| v[p]).collect::<Vec<_>>();
        Ok(Self {
            kind: self.kind,
            m: self.m,
            pefs: positions.iter().map(|&p| self.pefs[p].clone()).collect(),
            labels: self.labels.as_ref().map(pick),
            predictions: self.predictions.as_ref().map(pick),
        })
    }

    /// Apply a per-example transformation, keeping kind, dimension and labels.
    pub fn try_map<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&SparsePef) -> Result<SparsePef>,
    {
        Ok(Self {
            kind: self.kind,
            m: self.m,
            pefs: self.pefs.iter().map(f).collect::<Result<_>>()?,
            labels: self.labels.clone(),
            predictions: self.predictions.clone(),
        })
    }

    pub(crate) fn with_pefs(&self, m: usize, pefs: Vec<SparsePef>) -> Self {
        Self {
            kind: self.kind,
            m,
            pefs,
            labels: self.labels.clone(),
            predictions: self.predictions.clone(),
        }
    }
}
