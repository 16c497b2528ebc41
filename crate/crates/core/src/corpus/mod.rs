//! Documents, corpora and anchor sets.
//!
//! Every document is tokenized two ways on construction: bytes for the model
//! (vocabulary 256) and lowercased alphanumeric runs for lexical scoring.

mod anchors;
mod io;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use anchors::{build_anchor_set, select_anchor_documents, AnchorSet};
pub use io::{load_corpus, read_corpus, save_corpus, write_corpus};
pub use synth::{synth_corpus, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub domain: String,
    pub split: Split,
    pub model_tokens: Vec<u32>,
    pub lexical_terms: Vec<String>,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        domain: impl Into<String>,
        split: Split,
    ) -> Self {
        let text = text.into();
        let model_tokens = tokenize_bytes(&text);
        let lexical_terms = tokenize_lexical(&text);
        Document {
            id: id.into(),
            text,
            domain: domain.into(),
            split,
            model_tokens,
            lexical_terms,
        }
    }

    /// Inputs and next-token targets for training, truncated to the model
    /// context. `None` for documents shorter than two tokens.
    pub fn training_pair(&self, max_seq_len: usize) -> Option<(&[u32], &[u32])> {
        let n = self.model_tokens.len();
        if n < 2 {
            return None;
        }
        let len = (n - 1).min(max_seq_len);
        Some((&self.model_tokens[..len], &self.model_tokens[1..=len]))
    }

    /// Tokens fed to the model when embedding this document. Identical to
    /// the training inputs so the training forward pass can be reused; a
    /// single-token document embeds its only token.
    pub fn embedding_input(&self, max_seq_len: usize) -> &[u32] {
        match self.training_pair(max_seq_len) {
            Some((inputs, _)) => inputs,
            None => &self.model_tokens,
        }
    }
}

pub fn tokenize_bytes(text: &str) -> Vec<u32> {
    text.as_bytes().iter().map(|&b| u32::from(b)).collect()
}

pub fn detokenize_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

/// Lowercased maximal runs of Unicode alphanumeric characters, in order.
///
/// Lowercase mappings that produce non-alphanumeric marks (the combining dot
/// of `İ`) or characters that stay uppercase (mathematical capitals) are
/// dropped from the term, so every term is lowercase and re-tokenizes to
/// itself.
pub fn tokenize_lexical(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter_map(|run| {
            let term: String = run
                .chars()
                .flat_map(char::to_lowercase)
                .filter(|c| c.is_alphanumeric() && !c.is_uppercase())
                .collect();
            (!term.is_empty()).then_some(term)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub domains: BTreeSet<String>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>) -> Self {
        let domains = documents.iter().map(|d| d.domain.clone()).collect();
        Corpus { documents, domains }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn split(&self, split: Split) -> Corpus {
        self.filter(|d| d.split == split)
    }

    pub fn filter_domains<S: AsRef<str>>(&self, domains: &[S]) -> Corpus {
        self.filter(|d| domains.iter().any(|x| x.as_ref() == d.domain))
    }

    pub fn filter(&self, keep: impl Fn(&Document) -> bool) -> Corpus {
        Corpus::new(self.documents.iter().filter(|d| keep(d)).cloned().collect())
    }

    /// Indices of documents belonging to `domain`, in corpus order.
    pub fn domain_indices(&self, domain: &str) -> Vec<usize> {
        self.documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }
}
