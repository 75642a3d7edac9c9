//! Candidate rankings shared by the head and the baselines.
//!
//! Every scorer in the crate emits a [`Ranking`]: candidates sorted by
//! descending score, ties broken by a stable sort on the candidate id. The
//! evaluation code only ever consumes rankings, so the head and the lexical
//! and dense baselines are interchangeable there.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate_id: String,
    pub score: f64,
}

/// A total order over candidates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ranking {
    entries: Vec<ScoredCandidate>,
}

impl Ranking {
    /// Sorts by descending score; equal scores appear in candidate id order.
    ///
    /// NaN scores are ordered last.
    pub fn from_scores(scores: impl IntoIterator<Item = (String, f64)>) -> Self {
        let mut entries: Vec<ScoredCandidate> = scores
            .into_iter()
            .map(|(candidate_id, score)| ScoredCandidate {
                candidate_id,
                score,
            })
            .collect();
        entries.sort_by(|a, b| {
            a.candidate_id.cmp(&b.candidate_id)
        });
        entries.sort_by(|a, b| compare_desc(a.score, b.score));
        Ranking { entries }
    }

    pub fn entries(&self) -> &[ScoredCandidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The length-`k` prefix `S_k`, or the whole ranking if it is shorter.
    pub fn prefix(&self, k: usize) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .take(k)
            .map(|e| e.candidate_id.as_str())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.candidate_id.as_str()).collect()
    }

    pub fn score_of(&self, candidate_id: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.candidate_id == candidate_id)
            .map(|e| e.score)
    }

    /// 1-based rank of a candidate.
    pub fn rank_of(&self, candidate_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.candidate_id == candidate_id)
            .map(|p| p + 1)
    }
}

fn compare_desc(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        _ => b.partial_cmp(&a).unwrap_or(Ordering::Equal),
    }
}
