//! Cosine similarity kernel.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::Embedding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedding dimensions differ ({left} vs {right})")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding has zero (or non-finite) norm")]
    ZeroNormVector,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Squared Euclidean norm, rejecting zero and non-finite values.
fn checked_sq_norm(v: &Embedding) -> Result<f64, EmbedError> {
    let values = v.as_slice();
    let n = dot(values, values);
    if n > 0.0 && n.is_finite() {
        Ok(n)
    } else {
        Err(EmbedError::ZeroNormVector)
    }
}

// Shared by the pairwise and matrix paths so both produce identical bits.
// sqrt(x * x) == x exactly, so identical vectors score exactly 1.
fn cosine_from_parts(dot: f64, sq_a: f64, sq_b: f64) -> f64 {
    let denom_sq = sq_a * sq_b;
    let denom = if denom_sq.is_normal() { denom_sq.sqrt() } else { sq_a.sqrt() * sq_b.sqrt() };
    (dot / denom).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    let (na, nb) = (checked_sq_norm(a)?, checked_sq_norm(b)?);
    Ok(cosine_from_parts(dot(a.as_slice(), b.as_slice()), na, nb))
}

/// `1 - cosine_similarity`, in `[0, 2]`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    cosine_similarity(a, b).map(|s| 1.0 - s)
}

/// Dense row-major matrix of entry-by-exit similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "index ({row}, {col}) out of range");
        self.values[row * self.cols + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> SimilarityMatrix {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.values[r * self.cols + c]);
            }
        }
        SimilarityMatrix { rows: self.cols, cols: self.rows, values }
    }
}

/// Pairwise similarities between two embedding lists.
///
/// Rows are computed in parallel; each cell uses the same sequential dot
/// product as [`cosine_similarity`], so the result does not depend on the
/// thread count.
pub fn similarity_matrix(entries: &[Embedding], exits: &[Embedding]) -> Result<SimilarityMatrix, EmbedError> {
    let dim = entries.first().or(exits.first()).map(Embedding::dim);
    if let Some(d) = dim {
        if let Some(bad) = entries.iter().chain(exits).find(|e| e.dim() != d) {
            return Err(EmbedError::DimensionMismatch { left: d, right: bad.dim() });
        }
    }
    let entry_norms = entries.iter().map(checked_sq_norm).collect::<Result<Vec<_>, _>>()?;
    let exit_norms = exits.iter().map(checked_sq_norm).collect::<Result<Vec<_>, _>>()?;

    let cols = exits.len();
    let values: Vec<f64> = entries
        .par_iter()
        .zip(entry_norms.par_iter())
        .flat_map_iter(|(a, &na)| {
            exits
                .iter()
                .zip(&exit_norms)
                .map(move |(b, &nb)| cosine_from_parts(dot(a.as_slice(), b.as_slice()), na, nb))
        })
        .collect();
    Ok(SimilarityMatrix { rows: entries.len(), cols, values })
}

/// Boolean matrix with the same shape as the similarity matrix it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    values: Vec<bool>,
}

impl Mask {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        assert!(row < self.rows && col < self.cols, "index ({row}, {col}) out of range");
        self.values[row * self.cols + col]
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        if self.cols == 0 {
            return vec![Vec::new(); self.rows];
        }
        self.values.chunks(self.cols).map(<[bool]>::to_vec).collect()
    }
}

/// Cells whose similarity reaches `tau` (inclusive).
pub fn feasibility_from_threshold(sim: &SimilarityMatrix, tau: f64) -> Mask {
    Mask {
        rows: sim.rows,
        cols: sim.cols,
        values: sim.values.iter().map(|&s| s >= tau).collect(),
    }
}

#[cfg(test)]
pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> SimilarityMatrix {
    SimilarityMatrix {
        rows: rows.len(),
        cols: rows.first().map_or(0, Vec::len),
        values: rows.concat(),
    }
}
