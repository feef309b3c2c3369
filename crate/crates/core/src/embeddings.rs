//! Embedding storage, cosine-similarity kernels and the `.emb` file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "EMB1" | u32 dim | u64 count | count x (u16 id_len, id bytes) | count x dim f32
//! ```
//!
//! Rows are stored as written; nothing is re-normalized at load. Similarity
//! reductions run in `f64` regardless of the `f32` payload.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 4 + 4 + 8;

/// Slack allowed on `[-1, 1]` before a similarity is considered invalid.
pub const SIMILARITY_SLACK: f64 = 1e-9;

/// A cosine similarity, always within `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    /// Wraps `value`, clamping numerical overshoot of at most
    /// [`SIMILARITY_SLACK`] back into range.
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value.abs() > 1.0 + SIMILARITY_SLACK {
            return Err(Error::domain(format!("similarity {value} is outside [-1, 1]")));
        }
        Ok(SimilarityScore(value.clamp(-1.0, 1.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl From<SimilarityScore> for f64 {
    fn from(s: SimilarityScore) -> f64 {
        s.0
    }
}

/// Dense row-major matrix of embeddings, one row per image.
///
/// Immutable once built; every row is finite with a strictly positive norm
/// and ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::format("embedding dimension must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::format(format!(
                "payload has {} values, expected {} rows x {dim}",
                data.len(),
                ids.len()
            )));
        }
        let m = EmbeddingMatrix { dim, ids, data };
        if let Some((row, msg)) = m.first_invalid_row() {
            return Err(Error::format(format!("row {row} (`{}`): {msg}", m.ids[row])));
        }
        Ok(m)
    }

    /// Builds a matrix from owned rows. All rows must share one dimension.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::format("cannot infer dimension from zero rows; use EmbeddingMatrix::empty"))?;
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::format(format!(
                "row {bad} has dimension {}, expected {dim}",
                rows[bad].len()
            )));
        }
        Self::new(dim, ids, rows.concat())
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    fn first_invalid_row(&self) -> Option<(usize, &'static str)> {
        let mut seen = HashSet::with_capacity(self.ids.len());
        for (i, id) in self.ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Some((i, "duplicate id"));
            }
            let row = self.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Some((i, "non-finite value"));
            }
            if norm(row) == 0.0 {
                return Some((i, "zero-norm row"));
            }
        }
        None
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
        }
        EmbeddingMatrix {
            dim: self.dim,
            ids,
            data,
        }
    }

    /// Row-wise concatenation. Ids must stay unique across the inputs.
    pub fn concat(parts: &[&EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
        let first = parts.first().ok_or_else(|| Error::domain("nothing to concatenate"))?;
        let dim = first.dim;
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for p in parts {
            check_dims(dim, p.dim)?;
            ids.extend(p.ids.iter().cloned());
            data.extend_from_slice(&p.data);
        }
        EmbeddingMatrix::new(dim, ids, data)
    }

    /// Euclidean norm of every row, computed the same way as
    /// [`cosine_similarity`] does.
    pub fn row_norms(&self) -> Vec<f64> {
        self.rows().map(norm).collect()
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::format(format!("dimension mismatch: {a} vs {b}")));
    }
    Ok(())
}

fn norm<T: Copy + Into<f64>>(v: &[T]) -> f64 {
    v.iter()
        .map(|&x| {
            let x: f64 = x.into();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

fn dot<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y): (f64, f64) = (x.into(), y.into());
            x * y
        })
        .sum()
}

#[inline]
fn cosine_from_parts(dot: f64, na: f64, nb: f64) -> f64 {
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `dot(a, b) / (|a| |b|)`, accumulated in `f64`.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<SimilarityScore> {
    check_dims(a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine similarity of a zero-norm vector"));
    }
    Ok(SimilarityScore(cosine_from_parts(dot(a, b), na, nb)))
}

/// Dense `|a| x |b|` block of cosine similarities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// All cosine similarities between rows of `a` and rows of `b`.
///
/// Rows are processed in parallel, but each entry is computed with exactly
/// the arithmetic of [`cosine_similarity`], so the output does not depend on
/// scheduling.
pub fn pairwise_similarity(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<SimilarityMatrix> {
    check_dims(a.dim, b.dim)?;
    let (na, nb) = (a.row_norms(), b.row_norms());
    let cols = b.len();
    let mut data = vec![0.0; a.len() * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
            let ra = a.row(i);
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = cosine_from_parts(dot(ra, b.row(j)), na[i], nb[j]);
            }
        });
    }
    Ok(SimilarityMatrix {
        rows: a.len(),
        cols,
        data,
    })
}

/// Highest cosine similarity between `v` and any row of `refs`.
pub fn max_similarity_to_refs<T: Copy + Into<f64>>(v: &[T], refs: &EmbeddingMatrix) -> Result<SimilarityScore> {
    if refs.is_empty() {
        return Err(Error::domain("empty reference set"));
    }
    check_dims(v.len(), refs.dim)?;
    let nv = norm(v);
    if nv == 0.0 {
        return Err(Error::domain("cosine similarity of a zero-norm vector"));
    }
    let best = refs
        .rows()
        .map(|r| cosine_from_parts(dot(v, r), nv, norm(r)))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SimilarityScore(best))
}

/// Reads and validates an `.emb` file.
pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes `matrix` as an `.emb` file.
pub fn write_embedding_file(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(matrix)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn encode(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let dim = u32::try_from(matrix.dim).map_err(|_| Error::format("dimension does not fit in u32"))?;
    let id_bytes: usize = matrix.ids.iter().map(|s| 2 + s.len()).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + id_bytes + matrix.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(matrix.len() as u64).to_le_bytes());
    for id in &matrix.ids {
        let len = u16::try_from(id.len()).map_err(|_| Error::format(format!("id `{id}` longer than 65535 bytes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in &matrix.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format_at(
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
                self.pos as u64,
            )),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::format_at("bad magic, expected \"EMB1\"", 0));
    }
    let dim = u32::from_le_bytes(cur.take(4, "dim")?.try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::format_at("dimension must be positive", 4));
    }
    let count = u64::from_le_bytes(cur.take(8, "count")?.try_into().unwrap());
    // Each row needs at least a 2-byte id header plus its payload.
    let min_row = 2 + 4 * dim as u64;
    if count.saturating_mul(min_row) > (bytes.len() - HEADER_LEN) as u64 {
        return Err(Error::format_at(
            format!("count {count} exceeds what the file can hold"),
            8,
        ));
    }
    let count = count as usize;

    let mut ids = Vec::with_capacity(count);
    let mut seen = HashSet::with_capacity(count);
    for _ in 0..count {
        let at = cur.pos as u64;
        let len = u16::from_le_bytes(cur.take(2, "id length")?.try_into().unwrap()) as usize;
        let raw = cur.take(len, "id")?;
        let id = std::str::from_utf8(raw)
            .map_err(|_| Error::format_at("id is not valid UTF-8", at + 2))?
            .to_owned();
        if !seen.insert(id.clone()) {
            return Err(Error::format_at(format!("duplicate id `{id}`"), at));
        }
        ids.push(id);
    }

    let payload_start = cur.pos;
    let payload = cur.take(count * dim * 4, "payload")?;
    if cur.pos != bytes.len() {
        return Err(Error::format_at(
            format!("{} trailing bytes after payload", bytes.len() - cur.pos),
            cur.pos as u64,
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    for (i, row) in data.chunks_exact(dim).enumerate() {
        let at = (payload_start + i * dim * 4) as u64;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::format_at(format!("row {i} has a non-finite value"), at));
        }
        if norm(row) == 0.0 {
            return Err(Error::format_at(format!("row {i} has zero norm"), at));
        }
    }
    Ok(EmbeddingMatrix { dim, ids, data })
}
