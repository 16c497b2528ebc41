//! Okapi BM25 with the anchors as the indexed collection and a training
//! document's lexical terms as the query, averaged over anchors.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{AnchorSet, Document};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Params {
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_b")]
    pub b: f64,
}

fn default_k1() -> f64 {
    1.2
}

fn default_b() -> f64 {
    0.75
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    /// n(t): number of anchors containing term t.
    pub doc_freq: BTreeMap<String, u32>,
    /// Per-anchor term frequencies.
    pub term_freqs: Vec<HashMap<String, u32>>,
    pub doc_lengths: Vec<u32>,
    pub avg_len: f64,
    pub params: Bm25Params,
    pub anchor_count: usize,
}

impl Bm25Index {
    pub fn build(anchors: &AnchorSet, params: Bm25Params) -> Self {
        Self::from_documents(&anchors.anchors, params)
    }

    pub fn from_documents(docs: &[Document], params: Bm25Params) -> Self {
        let mut doc_freq = BTreeMap::new();
        let mut term_freqs = Vec::with_capacity(docs.len());
        let mut doc_lengths = Vec::with_capacity(docs.len());
        for doc in docs {
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &doc.lexical_terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
            term_freqs.push(tf);
            doc_lengths.push(doc.lexical_terms.len() as u32);
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / docs.len() as f64
        };
        Bm25Index {
            doc_freq,
            term_freqs,
            doc_lengths,
            avg_len,
            params,
            anchor_count: docs.len(),
        }
    }

    /// `ln(1 + (N − n + 0.5)/(n + 0.5))`; always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = f64::from(self.doc_freq.get(term).copied().unwrap_or(0));
        let total = self.anchor_count as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// Okapi score of a query term sequence against anchor `a`. Query terms
    /// are summed in order, repeats included.
    pub fn score_against(&self, query: &[String], a: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let len_norm = if self.avg_len > 0.0 {
            f64::from(self.doc_lengths[a]) / self.avg_len
        } else {
            0.0
        };
        let mut s = 0.0;
        for t in query {
            let Some(&tf) = self.term_freqs[a].get(t) else {
                continue;
            };
            let tf = f64::from(tf);
            s += self.idf(t) * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * len_norm));
        }
        s
    }
}

/// `(1/N_a) Σ_v BM25(doc, v)`; zero for an empty index or empty document.
/// Per-anchor sums are accumulated in anchor order, then divided once.
pub fn score_bm25(index: &Bm25Index, doc: &Document) -> f64 {
    if index.anchor_count == 0 || doc.lexical_terms.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..index.anchor_count {
        total += index.score_against(&doc.lexical_terms, a);
    }
    total / index.anchor_count as f64
}
