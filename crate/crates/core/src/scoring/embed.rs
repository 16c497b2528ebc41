use crate::corpus::{AnchorSet, Document};
use crate::error::{CuratorError, Result};
use crate::tinymodel::{embed_hidden, ModelState};

/// Norm floor for embedding normalization.
pub const EMBED_EPS: f64 = 1e-8;

const EMBED_CHUNK: usize = 64;

/// `φ(doc)`: normalized position-weighted pooling of the last-layer states.
pub fn document_embedding(model: &ModelState, doc: &Document) -> Result<Vec<f64>> {
    Ok(embed_documents(model, &[doc])?.remove(0))
}

/// Embeds documents in batches; output order follows `docs`.
pub fn embed_documents(model: &ModelState, docs: &[&Document]) -> Result<Vec<Vec<f64>>> {
    let max = model.config.max_seq_len;
    let d = model.config.d_model;
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(EMBED_CHUNK) {
        let mut inputs = Vec::with_capacity(chunk.len());
        for doc in chunk {
            let tokens = doc.embedding_input(max);
            if tokens.is_empty() {
                return Err(CuratorError::EmptySequence {
                    doc: Some(doc.id.clone()),
                });
            }
            inputs.push(tokens);
        }
        let pass = model.forward_batch(&inputs)?;
        for i in 0..chunk.len() {
            out.push(embed_hidden(pass.hidden(i), d, EMBED_EPS)?);
        }
    }
    Ok(out)
}

/// Mean dot product of a unit embedding against the anchor rows, each dot
/// clamped to `[-1, 1]`.
pub fn mean_cosine(embedding: &[f64], anchors: &AnchorSet) -> Result<f64> {
    if anchors.is_empty() || !anchors.is_embedded() {
        return Err(CuratorError::InvalidArgument(
            "similarity scoring needs a non-empty, embedded anchor set".into(),
        ));
    }
    if anchors.dim != embedding.len() {
        return Err(CuratorError::LengthMismatch {
            expected: anchors.dim,
            got: embedding.len(),
        });
    }
    let total: f64 = (0..anchors.len())
        .map(|i| {
            let dot: f64 = anchors.embedding(i).iter().zip(embedding).map(|(a, b)| a * b).sum();
            dot.clamp(-1.0, 1.0)
        })
        .sum();
    Ok(total / anchors.len() as f64)
}

/// Similarity of `doc` to the anchors under the model being trained.
pub fn score_adapt_embed(model: &ModelState, doc: &Document, anchors: &AnchorSet) -> Result<f64> {
    mean_cosine(&document_embedding(model, doc)?, anchors)
}

/// Same computation as [`score_adapt_embed`], but `encoder` is a snapshot
/// that is never trained; `anchors` must have been embedded by it.
pub fn score_frozen_embed(encoder: &ModelState, doc: &Document, anchors: &AnchorSet) -> Result<f64> {
    mean_cosine(&document_embedding(encoder, doc)?, anchors)
}

/// Recomputes every anchor embedding with `model`, returning a new set
/// stamped with `step`. The input set is left untouched.
pub fn refresh_anchors(model: &ModelState, anchors: &AnchorSet, step: u64) -> Result<AnchorSet> {
    let docs: Vec<&Document> = anchors.anchors.iter().collect();
    let rows = embed_documents(model, &docs)?;
    Ok(AnchorSet {
        anchors: anchors.anchors.clone(),
        embeddings: rows.concat(),
        dim: model.config.d_model,
        last_refresh_step: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::tinymodel::ModelConfig;

    fn model() -> ModelState {
        ModelState::init(&ModelConfig::new(1, 16, 2, 32), 4)
    }

    fn doc(id: &str, text: &str) -> Document {
        Document::new(id, text, "A", Split::Val)
    }

    fn set_with_rows(rows: Vec<Vec<f64>>) -> AnchorSet {
        let n = rows.len();
        AnchorSet {
            anchors: (0..n).map(|i| doc(&format!("a{i}"), "zz")).collect(),
            dim: rows[0].len(),
            embeddings: rows.concat(),
            last_refresh_step: 0,
        }
    }

    #[test]
    fn identical_anchor_scores_one() {
        let m = model();
        let x = doc("x", "hello world");
        let anchors = refresh_anchors(&m, &AnchorSet::unembedded(vec![x.clone()]), 0).unwrap();
        assert!((score_adapt_embed(&m, &x, &anchors).unwrap() - 1.0).abs() < 1e-12);
        assert!((score_frozen_embed(&m, &x, &anchors).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_and_mean() {
        let m = model();
        let x = doc("x", "some text here");
        let phi = document_embedding(&m, &x).unwrap();
        // a unit vector orthogonal to phi
        let mut ortho = vec![0.0; phi.len()];
        ortho[0] = phi[1];
        ortho[1] = -phi[0];
        let ortho = crate::tinymodel::l2_normalize(&ortho, 1e-12);
        let one = set_with_rows(vec![ortho.clone()]);
        assert!(score_adapt_embed(&m, &x, &one).unwrap().abs() < 1e-12);
        let two = set_with_rows(vec![phi.clone(), ortho]);
        assert!((score_adapt_embed(&m, &x, &two).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn refresh_is_deterministic_and_stamped() {
        let m = model();
        let base = AnchorSet::unembedded(vec![doc("a", "abc"), doc("b", "xyz q")]);
        let r1 = refresh_anchors(&m, &base, 6).unwrap();
        let r2 = refresh_anchors(&m, &base, 6).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.last_refresh_step, 6);
        for i in 0..2 {
            let single = AnchorSet {
                anchors: vec![r1.anchors[i].clone()],
                embeddings: r1.embedding(i).to_vec(),
                dim: r1.dim,
                last_refresh_step: 6,
            };
            let s = score_adapt_embed(&m, &r1.anchors[i], &single).unwrap();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_documents_rejected() {
        let m = model();
        let base = AnchorSet::unembedded(vec![doc("empty", "")]);
        assert!(matches!(
            refresh_anchors(&m, &base, 1),
            Err(CuratorError::EmptySequence { .. })
        ));
        let anchors = refresh_anchors(&m, &AnchorSet::unembedded(vec![doc("a", "ab")]), 0).unwrap();
        assert!(score_adapt_embed(&m, &doc("e", ""), &anchors).is_err());
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let m = model();
        let anchors = refresh_anchors(
            &m,
            &AnchorSet::unembedded(vec![doc("a", "abc def"), doc("b", "123 456 789"), doc("c", "!!")]),
            0,
        )
        .unwrap();
        for text in ["x", "hello", "the quick brown fox", "~~~~~~~~~~"] {
            let s = score_adapt_embed(&m, &doc("q", text), &anchors).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }
}
