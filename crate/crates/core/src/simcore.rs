//! Exact similarity, nearest-gallery matching and brute-force top-k search.
//!
//! All scores accumulate in `f64` regardless of the storage precision of the
//! inputs. Ties are broken by lowest gallery index (matching) or by
//! lexicographically smallest image id (top-k).

use std::cmp::Ordering;
use std::collections::HashSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    #[default]
    Cosine,
    Dot,
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SimilarityKind::Cosine),
            "dot" => Ok(SimilarityKind::Dot),
            other => Err(Error::invalid(format!("unknown similarity kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub best_index: usize,
    pub scores: Vec<f64>,
}

/// Scalar element types accepted by the similarity functions.
pub trait Component: Copy {
    fn as_f64(self) -> f64;
}

impl Component for f32 {
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Component for f64 {
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub fn similarity<T: Component>(a: &[T], b: &[T], kind: SimilarityKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            location: "similarity".into(),
            expected: a.len(),
            found: b.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match kind {
        SimilarityKind::Dot => Ok(dot),
        SimilarityKind::Cosine => {
            if na == 0.0 || nb == 0.0 {
                return Err(Error::invalid("cosine similarity of a zero vector"));
            }
            Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
        }
    }
}

/// Index of the maximum score, lowest index on ties. NaN scores never win.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            None if !s.is_nan() => best = Some(i),
            Some(b) if s > scores[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Nearest-gallery matching: `argmax_i Sim(query, gallery[i])`.
pub fn match_by_similarity<T: Component, V: AsRef<[T]>>(
    query: &[T],
    gallery: &[V],
    kind: SimilarityKind,
) -> Result<MatchResult> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    let scores = gallery
        .iter()
        .map(|g| similarity(query, g.as_ref(), kind))
        .collect::<Result<Vec<_>>>()?;
    let best_index = argmax(&scores).ok_or_else(|| Error::invalid("all scores are NaN"))?;
    Ok(MatchResult { best_index, scores })
}

fn rank_order(a: &(String, f64), b: &(String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// The `k` highest-scoring records of `pool` not in `exclude`, ordered by
/// (score desc, image_id asc). Returns everything when fewer than `k` remain.
pub fn top_k(
    query: &[f32],
    pool: &EmbeddingSet,
    k: usize,
    kind: SimilarityKind,
    exclude: &HashSet<String>,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for rec in pool.records() {
        if exclude.contains(&rec.image_id) {
            continue;
        }
        scored.push((rec.image_id.clone(), similarity(query, &rec.vector, kind)?));
    }
    if scored.is_empty() {
        return Err(Error::invalid("pool is empty after exclusion"));
    }
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(scored)
}
