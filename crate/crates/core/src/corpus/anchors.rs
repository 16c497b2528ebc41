use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Document};
use crate::error::{CuratorError, Result};
use crate::scoring::refresh_anchors;
use crate::tinymodel::ModelState;

/// The validation/query pool plus its current embedding matrix.
///
/// Rows of `embeddings` are unit vectors of the model width (row-major,
/// `anchors.len() × dim`). A set built only for lexical scoring has
/// `dim == 0` and no rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Document>,
    pub embeddings: Vec<f64>,
    pub dim: usize,
    pub last_refresh_step: u64,
}

impl AnchorSet {
    /// Anchors without embeddings, for BM25 or as input to a refresh.
    pub fn unembedded(anchors: Vec<Document>) -> Self {
        AnchorSet {
            anchors,
            embeddings: Vec::new(),
            dim: 0,
            last_refresh_step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn is_embedded(&self) -> bool {
        self.dim > 0 && self.embeddings.len() == self.dim * self.anchors.len()
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ids(&self) -> Vec<&str> {
        self.anchors.iter().map(|d| d.id.as_str()).collect()
    }

    /// Total model-input tokens across anchors; one refresh costs a forward
    /// pass over exactly these.
    pub fn token_count(&self, max_seq_len: usize) -> u64 {
        self.anchors
            .iter()
            .map(|d| d.embedding_input(max_seq_len).len() as u64)
            .sum()
    }
}

/// Picks the anchor documents: `per_domain` per domain (0 takes all),
/// sampled with `seed`, domains in name order, corpus order within a domain.
pub fn select_anchor_documents(
    val_corpus: &Corpus,
    per_domain: usize,
    seed: u64,
) -> Result<Vec<Document>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for domain in &val_corpus.domains {
        let mut idx = val_corpus.domain_indices(domain);
        if per_domain > 0 {
            if idx.len() < per_domain {
                return Err(CuratorError::TooFewDocuments {
                    domain: domain.clone(),
                    available: idx.len(),
                    requested: per_domain,
                });
            }
            idx.shuffle(&mut rng);
            idx.truncate(per_domain);
            idx.sort_unstable();
        }
        picked.extend(idx.into_iter().map(|i| val_corpus.documents[i].clone()));
    }
    Ok(picked)
}

/// Samples anchors and embeds them with one forward pass of `model`.
pub fn build_anchor_set(
    val_corpus: &Corpus,
    per_domain: usize,
    seed: u64,
    model: &ModelState,
) -> Result<AnchorSet> {
    let docs = select_anchor_documents(val_corpus, per_domain, seed)?;
    refresh_anchors(model, &AnchorSet::unembedded(docs), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Split, SynthSpec};
    use crate::tinymodel::ModelConfig;

    fn val_corpus() -> Corpus {
        synth_corpus(&SynthSpec { n_per_domain: 1000, seq_len: 16, seed: 1 }).split(Split::Val)
    }

    #[test]
    fn fifty_per_domain() {
        let docs = select_anchor_documents(&val_corpus(), 50, 9).unwrap();
        assert_eq!(docs.len(), 100);
        assert_eq!(docs.iter().filter(|d| d.domain == "A").count(), 50);
    }

    #[test]
    fn zero_takes_all_and_seed_is_deterministic() {
        let val = val_corpus();
        assert_eq!(select_anchor_documents(&val, 0, 1).unwrap().len(), val.len());
        let a: Vec<_> = select_anchor_documents(&val, 10, 5).unwrap().into_iter().map(|d| d.id).collect();
        let b: Vec<_> = select_anchor_documents(&val, 10, 5).unwrap().into_iter().map(|d| d.id).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_names_domain() {
        let err = select_anchor_documents(&val_corpus(), 101, 0).unwrap_err();
        match err {
            CuratorError::TooFewDocuments { domain, .. } => assert_eq!(domain, "A"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn built_set_is_embedded_with_unit_rows() {
        let cfg = ModelConfig::new(1, 16, 2, 16);
        let model = ModelState::init(&cfg, 3);
        let set = build_anchor_set(&val_corpus(), 5, 2, &model).unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(set.last_refresh_step, 0);
        assert_eq!(set.embeddings.len(), 10 * 16);
        for i in 0..set.len() {
            let norm: f64 = set.embedding(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
