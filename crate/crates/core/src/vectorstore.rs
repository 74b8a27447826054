//! Exact cosine top-k search over an immutable set of chunk vectors.
//!
//! Vectors are stored as `f32` in one row-major buffer; scores accumulate in
//! `f64`. Hits are ordered by descending score, then ascending entry
//! (build) order, so results are fully deterministic.

mod format;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ChunkRef;
use crate::embedding::{EmbeddingVector, UNIT_NORM_TOLERANCE};

pub use format::{decode, encode, load_index, save_index, IndexFormatError, FORMAT_VERSION, MAGIC};

/// Entries per parallel work block in [`VectorIndex::search_top_k`].
const SEARCH_BLOCK: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("dimension mismatch: index has {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("index dimension must be positive")]
    ZeroDim,
    #[error("duplicate chunk reference {0}")]
    DuplicateRef(ChunkRef),
    #[error("vector for {0} is not unit-norm")]
    NotUnit(ChunkRef),
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct IndexMetadata {
    pub corpus_fingerprint: String,
    pub embedder_id: String,
    /// RFC 3339; only written when a build time is injected, so that
    /// rebuilding identical inputs reproduces identical bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub built_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub chunk_ref: ChunkRef,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub chunk_ref: ChunkRef,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dim() != b.dim() {
        return Err(IndexError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    debug_assert!(a.is_unit() && b.is_unit(), "cosine expects unit vectors");
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    refs: Vec<ChunkRef>,
    data: Vec<f32>,
    metadata: IndexMetadata,
}

impl VectorIndex {
    pub fn empty(dim: usize, metadata: IndexMetadata) -> Result<Self, IndexError> {
        Self::build(dim, metadata, Vec::new())
    }

    /// Builds an index; entry order is preserved and used for tie-breaking.
    pub fn build(
        dim: usize,
        metadata: IndexMetadata,
        entries: impl IntoIterator<Item = IndexEntry>,
    ) -> Result<Self, IndexError> {
        if dim == 0 {
            return Err(IndexError::ZeroDim);
        }
        let mut refs = Vec::new();
        let mut data = Vec::new();
        let mut seen = HashSet::new();
        for e in entries {
            if e.vector.dim() != dim {
                return Err(IndexError::DimMismatch {
                    expected: dim,
                    actual: e.vector.dim(),
                });
            }
            if !e.vector.is_unit() {
                return Err(IndexError::NotUnit(e.chunk_ref));
            }
            if !seen.insert(e.chunk_ref.clone()) {
                return Err(IndexError::DuplicateRef(e.chunk_ref));
            }
            data.extend(e.vector.values().iter().map(|&v| v as f32));
            refs.push(e.chunk_ref);
        }
        Ok(Self {
            dim,
            refs,
            data,
            metadata,
        })
    }

    pub(crate) fn from_raw(dim: usize, refs: Vec<ChunkRef>, data: Vec<f32>, metadata: IndexMetadata) -> Self {
        debug_assert_eq!(refs.len() * dim, data.len());
        Self {
            dim,
            refs,
            data,
            metadata,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn metadata(&self) -> &IndexMetadata {
        &self.metadata
    }

    pub fn chunk_ref(&self, i: usize) -> &ChunkRef {
        &self.refs[i]
    }

    pub fn refs(&self) -> &[ChunkRef] {
        &self.refs
    }

    /// Stored `f32` components of entry `i`.
    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Entry `i` widened back to an [`EmbeddingVector`].
    pub fn entry(&self, i: usize) -> IndexEntry {
        IndexEntry {
            chunk_ref: self.refs[i].clone(),
            vector: EmbeddingVector::from_f32(self.vector(i)).expect("stored vectors are finite"),
        }
    }

    fn score(&self, i: usize, query: &[f64]) -> f64 {
        let dot: f64 = self
            .vector(i)
            .iter()
            .zip(query)
            .map(|(&x, &q)| x as f64 * q)
            .sum();
        dot.clamp(-1.0, 1.0)
    }

    fn check_query(&self, query: &EmbeddingVector, k: usize) -> Result<(), IndexError> {
        if query.dim() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        debug_assert!(
            (query.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE,
            "query must be unit-norm"
        );
        Ok(())
    }

    /// Top-k selection over entries `[start, end)`, best first.
    fn select(&self, query: &[f64], k: usize, start: usize, end: usize) -> Vec<Candidate> {
        // Min-heap on quality: the root is the worst candidate kept so far.
        let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
        for index in start..end {
            let c = Candidate {
                score: self.score(index, query),
                index,
            };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(c));
            } else if let Some(worst) = heap.peek() {
                if c > worst.0 {
                    heap.pop();
                    heap.push(std::cmp::Reverse(c));
                }
            }
        }
        let mut out: Vec<Candidate> = heap.into_iter().map(|r| r.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    fn to_hits(&self, best: Vec<Candidate>) -> Vec<SearchHit> {
        best.into_iter()
            .enumerate()
            .map(|(i, c)| SearchHit {
                chunk_ref: self.refs[c.index].clone(),
                score: c.score,
                rank: i + 1,
            })
            .collect()
    }

    /// Exact top-k on one thread.
    pub fn search_top_k_sequential(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<SearchHit>, IndexError> {
        self.check_query(query, k)?;
        Ok(self.to_hits(self.select(query.values(), k, 0, self.len())))
    }

    /// Exact top-k. Scans blocks in parallel when the `parallel` feature is
    /// on; the result is identical to [`Self::search_top_k_sequential`].
    pub fn search_top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        self.check_query(query, k)?;
        if !crate::par::PARALLEL || self.len() <= SEARCH_BLOCK {
            return Ok(self.to_hits(self.select(query.values(), k, 0, self.len())));
        }
        let blocks: Vec<usize> = (0..self.len()).step_by(SEARCH_BLOCK).collect();
        let partial = crate::par::map_slice(&blocks, |&start| {
            self.select(query.values(), k, start, (start + SEARCH_BLOCK).min(self.len()))
        });
        let mut merged: Vec<Candidate> = partial.into_iter().flatten().collect();
        merged.sort_unstable_by(|a, b| b.cmp(a));
        merged.truncate(k);
        Ok(self.to_hits(merged))
    }
}

/// Orders by score ascending, then by entry index descending, so that the
/// greatest candidate is the best hit.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    index: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

pub fn search_top_k(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
) -> Result<Vec<SearchHit>, IndexError> {
    index.search_top_k(query, k)
}
