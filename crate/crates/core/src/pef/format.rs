//! Little-endian binary interchange formats.
//!
//! NPEF (PEF sets):
//!
//! ```text
//! "NPEF" | u32 version=1 | u8 kind (0 diag, 1 lrm) | u64 n | u64 m
//! per example: u64 example_id | f32 alpha | u32 rank | u64 nnz
//!              nnz x (u32 class_row | u64 param_index | f32 value), sorted
//! optional:    "NPLB" | n x (i64 label | i64 prediction), -1 when absent
//! ```
//!
//! NPFD (decompositions):
//!
//! ```text
//! "NPFD" | u32 version=1 | u64 n | u64 r | u64 m' | u64 m
//! f32 W (n x r, row-major) | f32 G (r x m', row-major) | u64 kept_indices (m')
//! u64 json_len | json_len bytes of UTF-8 JSON metadata
//! ```
//!
//! Values are quantized to f32 on write; everything read back is re-written
//! byte-identically.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ColumnIndexMap, Entry, PefKind, PefSet, SparsePef};
use crate::decomposition::{Decomposition, LossRecord};
use crate::error::{NpeffError, Result};

const NPEF_MAGIC: &[u8; 4] = b"NPEF";
const NPFD_MAGIC: &[u8; 4] = b"NPFD";
const LABELS_MAGIC: &[u8; 4] = b"NPLB";
const VERSION: u32 = 1;
const ABSENT: i64 = -1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn err(&self, offset: usize, message: impl Into<String>) -> NpeffError {
        NpeffError::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(self.err(self.pos, format!("truncated while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array(what)?))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array(what)?))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| self.err(at, format!("{what} {v} does not fit in memory")))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.array::<4>("magic")?;
        if &got != want {
            return Err(self.err(
                self.pos - 4,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(self.err(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Capacity hint that cannot be inflated by a corrupt count field.
    fn capacity(&self, count: usize, record_size: usize) -> usize {
        count.min(self.remaining() / record_size.max(1))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_pef_set(set: &PefSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NPEF_MAGIC);
    put_u32(&mut out, VERSION);
    out.push(set.kind().code());
    put_u64(&mut out, set.len() as u64);
    put_u64(&mut out, set.m() as u64);
    for p in set.pefs() {
        put_u64(&mut out, p.example_id());
        put_f32(&mut out, p.alpha());
        put_u32(&mut out, p.rank());
        put_u64(&mut out, p.nnz() as u64);
        for e in p.entries() {
            put_u32(&mut out, e.row);
            put_u64(&mut out, e.col as u64);
            put_f32(&mut out, e.value);
        }
    }
    // A trailer holding only absent markers reads back as "no labels", so it
    // is never written; this keeps write -> read -> write byte-identical.
    let informative = |v: Option<&[i64]>| v.is_some_and(|v| v.iter().any(|&x| x != ABSENT));
    if informative(set.labels()) || informative(set.predictions()) {
        out.extend_from_slice(LABELS_MAGIC);
        for i in 0..set.len() {
            let label = set.labels().map_or(ABSENT, |l| l[i]);
            let pred = set.predictions().map_or(ABSENT, |p| p[i]);
            out.extend_from_slice(&label.to_le_bytes());
            out.extend_from_slice(&pred.to_le_bytes());
        }
    }
    out
}

pub fn decode_pef_set(bytes: &[u8]) -> Result<PefSet> {
    let mut r = Reader::new(bytes);
    r.magic(NPEF_MAGIC)?;
    r.version()?;
    let at = r.pos;
    let kind_code = r.u8("kind")?;
    let kind = PefKind::from_code(kind_code)
        .ok_or_else(|| r.err(at, format!("unknown PEF kind {kind_code}")))?;
    let n = r.usize("example count")?;
    let m = r.usize("parameter dimension")?;
    let mut pefs = Vec::with_capacity(r.capacity(n, 24));
    for _ in 0..n {
        let start = r.pos;
        let example_id = r.u64("example id")?;
        let alpha = r.f32("alpha")? as f64;
        let rank = r.u32("rank")?;
        let nnz = r.usize("nnz")?;
        let mut entries = Vec::with_capacity(r.capacity(nnz, 16));
        for _ in 0..nnz {
            let at = r.pos;
            let row = r.u32("class row")?;
            let col = r.usize("parameter index")?;
            let value = r.f32("value")? as f64;
            if row >= rank || col >= m {
                return Err(r.err(at, format!("entry ({row}, {col}) outside rank {rank} x m {m}")));
            }
            if let Some(prev) = entries.last() {
                let prev: &Entry = prev;
                if (prev.row, prev.col) >= (row, col) {
                    return Err(r.err(at, "entries are not strictly sorted"));
                }
            }
            entries.push(Entry::new(row, col, value));
        }
        let pef = SparsePef::new(rank, entries, alpha, example_id)
            .map_err(|e| r.err(start, e.to_string()))?;
        pefs.push(pef);
    }
    let body_end = r.pos;
    let set = PefSet::new(kind, m, pefs).map_err(|e| r.err(body_end, e.to_string()))?;
    if r.remaining() == 0 {
        return Ok(set);
    }
    r.magic(LABELS_MAGIC)?;
    let mut labels = Vec::with_capacity(n);
    let mut preds = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.i64("label")?);
        preds.push(r.i64("prediction")?);
    }
    if r.remaining() != 0 {
        return Err(r.err(r.pos, "trailing bytes after label section"));
    }
    let keep = |v: Vec<i64>| (!v.iter().all(|&x| x == ABSENT)).then_some(v);
    set.with_labels(keep(labels), keep(preds))
}

pub fn write_pef_file(set: &PefSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pef_set(set))?;
    Ok(())
}

pub fn read_pef_file(path: impl AsRef<Path>) -> Result<PefSet> {
    decode_pef_set(&fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct DecompositionMeta {
    kind: PefKind,
    example_ids: Vec<u64>,
    frozen_components: usize,
    loss_history: Vec<LossRecord>,
    config: serde_json::Value,
}

pub fn encode_decomposition(dec: &Decomposition) -> Result<Vec<u8>> {
    dec.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(NPFD_MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, dec.w.nrows() as u64);
    put_u64(&mut out, dec.w.ncols() as u64);
    put_u64(&mut out, dec.components.ncols() as u64);
    put_u64(&mut out, dec.index_map.original_dim() as u64);
    for &v in dec.w.iter() {
        put_f32(&mut out, v);
    }
    for &v in dec.components.iter() {
        put_f32(&mut out, v);
    }
    for &k in dec.index_map.kept() {
        put_u64(&mut out, k as u64);
    }
    let meta = DecompositionMeta {
        kind: dec.kind,
        example_ids: dec.example_ids.clone(),
        frozen_components: dec.frozen_components,
        loss_history: dec.loss_history.clone(),
        config: dec.config.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    Ok(out)
}

fn read_matrix(r: &mut Reader<'_>, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c.checked_mul(4).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| r.err(r.pos, format!("truncated while reading {what}")))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.f32(what)? as f64);
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("exact length"))
}

pub fn decode_decomposition(bytes: &[u8]) -> Result<Decomposition> {
    let mut r = Reader::new(bytes);
    r.magic(NPFD_MAGIC)?;
    r.version()?;
    let n = r.usize("n")?;
    let rank = r.usize("r")?;
    let m_reduced = r.usize("m'")?;
    let m = r.usize("m")?;
    let w = read_matrix(&mut r, n, rank, "W")?;
    let components = read_matrix(&mut r, rank, m_reduced, "G")?;
    let at = r.pos;
    let mut kept = Vec::with_capacity(r.capacity(m_reduced, 8));
    for _ in 0..m_reduced {
        kept.push(r.usize("kept index")?);
    }
    let index_map = ColumnIndexMap::new(m, kept).map_err(|e| r.err(at, e.to_string()))?;
    let len = r.usize("metadata length")?;
    let at = r.pos;
    let json = r.take(len, "metadata")?;
    let meta: DecompositionMeta =
        serde_json::from_slice(json).map_err(|e| r.err(at, format!("metadata: {e}")))?;
    if r.remaining() != 0 {
        return Err(r.err(r.pos, "trailing bytes after metadata"));
    }
    let dec = Decomposition {
        kind: meta.kind,
        w,
        components,
        index_map,
        loss_history: meta.loss_history,
        example_ids: meta.example_ids,
        frozen_components: meta.frozen_components,
        config: meta.config,
    };
    dec.validate().map_err(|e| r.err(at, e.to_string()))?;
    Ok(dec)
}

pub fn write_decomposition_file(dec: &Decomposition, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_decomposition(dec)?)?;
    Ok(())
}

pub fn read_decomposition_file(path: impl AsRef<Path>) -> Result<Decomposition> {
    decode_decomposition(&fs::read(path)?)
}
