//! Reference scorers: Okapi BM25 and an inner-product dense scorer. Both read
//! the same tool document the head sees as `candidate_text`.

use crate::ranking::Ranking;
use crate::text::{hash_key, tokenize};
use crate::trace::{ToolCatalog, ToolSpec};
use std::collections::HashMap;
use std::sync::Mutex;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("embedding dimension {got} does not match cached dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("embedding provider returned {got} vectors for {expected} texts")]
    Count { expected: usize, got: usize },
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    pub doc_ids: Vec<String>,
    pub term_freqs: Vec<HashMap<String, usize>>,
    pub doc_lens: Vec<usize>,
    pub avgdl: f64,
    pub doc_freq: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn build(catalog: &ToolCatalog, k1: f64, b: f64) -> Result<Self, BaselineError> {
        Self::from_tools(&catalog.tools.iter().collect::<Vec<_>>(), k1, b)
    }

    pub fn from_tools(tools: &[&ToolSpec], k1: f64, b: f64) -> Result<Self, BaselineError> {
        let docs: Vec<(String, String)> = tools
            .iter()
            .map(|t| (t.tool_id.clone(), t.candidate_text()))
            .collect();
        Self::from_documents(&docs, k1, b)
    }

    /// Index over `(id, text)` documents.
    pub fn from_documents(docs: &[(String, String)], k1: f64, b: f64) -> Result<Self, BaselineError> {
        if docs.is_empty() {
            return Err(BaselineError::EmptyCatalog);
        }
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for (_, text) in docs {
            let toks = tokenize(text);
            doc_lens.push(toks.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
        }
        let avgdl = doc_lens.iter().sum::<usize>() as f64 / docs.len() as f64;
        Ok(Bm25Index {
            k1,
            b,
            doc_ids: docs.iter().map(|d| d.0.clone()).collect(),
            term_freqs,
            doc_lens,
            avgdl,
            doc_freq,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    /// `max(0, ln((N - df + 0.5) / (df + 0.5)))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.n_docs() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    pub fn score(&self, doc: usize, query_terms: &[String]) -> f64 {
        let tf = &self.term_freqs[doc];
        let len_norm = if self.avgdl > 0.0 {
            self.doc_lens[doc] as f64 / self.avgdl
        } else {
            0.0
        };
        query_terms
            .iter()
            .map(|q| {
                let f = tf.get(q).copied().unwrap_or(0) as f64;
                if f == 0.0 {
                    return 0.0;
                }
                self.idf(q) * f * (self.k1 + 1.0) / (f + self.k1 * (1.0 - self.b + self.b * len_norm))
            })
            .sum()
    }

    pub fn rank(&self, query: &str) -> Ranking {
        let q = tokenize(query);
        Ranking::from_scores(
            self.doc_ids
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), self.score(i, &q))),
        )
    }
}

/// Text encoder for the dense scorer.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BaselineError>;
}

/// Deterministic stand-in encoder: L2-normalized hashed token counts.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BaselineError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; self.dim];
                for tok in tokenize(t) {
                    v[(hash_key("embed", &tok) % self.dim as u64) as usize] += 1.0;
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 {
                    v.iter_mut().for_each(|x| *x /= n);
                }
                v
            })
            .collect())
    }
}

/// Inner-product scorer with a per-tool embedding cache.
pub struct DenseScorer<P> {
    pub provider: P,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<P: EmbeddingProvider> DenseScorer<P> {
    pub fn new(provider: P) -> Self {
        DenseScorer {
            provider,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Seeds the cache, e.g. with embeddings computed offline.
    pub fn insert_cached(&self, tool_id: &str, embedding: Vec<f64>) {
        self.cache
            .lock()
            .expect("cache lock")
            .insert(tool_id.to_string(), embedding);
    }

    fn embed_checked(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BaselineError> {
        let out = self.provider.embed(texts)?;
        if out.len() != texts.len() {
            return Err(BaselineError::Count {
                expected: texts.len(),
                got: out.len(),
            });
        }
        Ok(out)
    }

    pub fn rank(&self, query: &str, tools: &[&ToolSpec]) -> Result<Ranking, BaselineError> {
        let q = self.embed_checked(&[query.to_string()])?.remove(0);
        let mut cache = self.cache.lock().expect("cache lock");
        let missing: Vec<&ToolSpec> = tools
            .iter()
            .copied()
            .filter(|t| !cache.contains_key(&t.tool_id))
            .collect();
        if !missing.is_empty() {
            let texts: Vec<String> = missing.iter().map(|t| t.candidate_text()).collect();
            for (t, e) in missing.iter().zip(self.embed_checked(&texts)?) {
                cache.insert(t.tool_id.clone(), e);
            }
        }
        let mut scores = Vec::with_capacity(tools.len());
        for t in tools {
            let e = &cache[&t.tool_id];
            if e.len() != q.len() {
                return Err(BaselineError::Dimension {
                    expected: e.len(),
                    got: q.len(),
                });
            }
            scores.push((t.tool_id.clone(), e.iter().zip(&q).map(|(a, b)| a * b).sum()));
        }
        Ok(Ranking::from_scores(scores))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(d: &[(&str, &str)]) -> Vec<(String, String)> {
        d.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn corpus_statistics_by_hand() {
        let idx = Bm25Index::from_documents(&docs(&[("d1", "alpha beta"), ("d2", "alpha")]), 1.2, 0.75).unwrap();
        assert_eq!(idx.n_docs(), 2);
        assert_eq!(idx.doc_freq["alpha"], 2);
        assert_eq!(idx.doc_freq["beta"], 1);
        assert_eq!(idx.avgdl, 1.5);
        assert_eq!(idx.idf("alpha"), 0.0);
    }

    #[test]
    fn single_document_avgdl() {
        let idx = Bm25Index::from_documents(&docs(&[("d", "one two three")]), 1.2, 0.75).unwrap();
        assert_eq!(idx.avgdl, 3.0);
    }

    #[test]
    fn empty_query_scores_zero_in_id_order() {
        let idx = Bm25Index::from_documents(&docs(&[("b", "x"), ("a", "y")]), 1.2, 0.75).unwrap();
        let r = idx.rank("");
        assert_eq!(r.ids(), vec!["a", "b"]);
        assert!(r.entries().iter().all(|e| e.score == 0.0));
    }

    #[test]
    fn empty_catalog_is_an_error() {
        assert!(matches!(
            Bm25Index::from_documents(&[], 1.2, 0.75),
            Err(BaselineError::EmptyCatalog)
        ));
    }
}
