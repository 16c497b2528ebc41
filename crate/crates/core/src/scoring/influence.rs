use crate::corpus::{AnchorSet, Document};
use crate::error::{CuratorError, Result};
use crate::tinymodel::{weighted_grad, LossNormalization, ModelState, Sample};

fn as_sample<'a>(doc: &'a Document, max_seq_len: usize) -> Result<Sample<'a>> {
    let (inputs, targets) = doc
        .training_pair(max_seq_len)
        .ok_or_else(|| CuratorError::TooShort {
            doc: doc.id.clone(),
            len: doc.model_tokens.len(),
            min: 2,
        })?;
    Ok(Sample {
        id: &doc.id,
        inputs,
        targets,
    })
}

/// Flat gradient of one document's mean next-token loss.
pub fn sample_gradient(model: &ModelState, doc: &Document) -> Result<Vec<f64>> {
    let s = as_sample(doc, model.config.max_seq_len)?;
    weighted_grad(model, &[s], &[1.0], LossNormalization::Raw)
}

/// Gradient of the mean anchor loss, `∇ (1/|V|) Σ_v ℓ(v)`.
pub fn anchor_mean_gradient(proxy: &ModelState, anchors: &AnchorSet) -> Result<Vec<f64>> {
    if anchors.is_empty() {
        return Err(CuratorError::InvalidArgument("gradient influence needs anchors".into()));
    }
    let samples = anchors
        .anchors
        .iter()
        .map(|d| as_sample(d, proxy.config.max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    let coef = 1.0 / samples.len() as f64;
    let mut total = vec![0.0; proxy.params.len()];
    for chunk in samples.chunks(32) {
        let g = weighted_grad(proxy, chunk, &vec![coef; chunk.len()], LossNormalization::Raw)?;
        total.iter_mut().zip(&g).for_each(|(t, x)| *t += x);
    }
    Ok(total)
}

/// `⟨∇ℓ(doc), g_anchor⟩` against a precomputed anchor gradient.
pub fn score_grad_influence_with(proxy: &ModelState, doc: &Document, anchor_grad: &[f64]) -> Result<f64> {
    let g = sample_gradient(proxy, doc)?;
    let s: f64 = g.iter().zip(anchor_grad).map(|(a, b)| a * b).sum();
    if !s.is_finite() {
        return Err(CuratorError::NonFinite {
            sample: doc.id.clone(),
            what: "gradient influence",
        });
    }
    Ok(s)
}

pub fn score_grad_influence(proxy: &ModelState, doc: &Document, anchors: &AnchorSet) -> Result<f64> {
    score_grad_influence_with(proxy, doc, &anchor_mean_gradient(proxy, anchors)?)
}
